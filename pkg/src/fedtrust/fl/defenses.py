"""Update screening run by the task publisher before aggregation."""

from __future__ import annotations

import enum

from .data import Dataset
from .model import LocalUpdate, ModelState, correct_count


class ElapsedVerdict(enum.Enum):
    OK = "ok"
    LAZY = "lazy"


class RoniVerdict(enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"


def elapsed_check(update: LocalUpdate, compute_rate: float, tolerance: float) -> ElapsedVerdict:
    """Flag an update whose claimed compute time is too short for its data size."""
    if compute_rate <= 0:
        raise ValueError("compute_rate must be positive")
    if not (0.0 < tolerance < 1.0):
        raise ValueError("tolerance must be in (0, 1)")
    expected = compute_rate * update.claimed_data_size
    if update.claimed_elapsed < expected * (1.0 - tolerance):
        return ElapsedVerdict.LAZY
    return ElapsedVerdict.OK


def roni_decision(acc_with: float, acc_without: float, epsilon: float) -> RoniVerdict:
    if acc_with - acc_without < -epsilon:
        return RoniVerdict.REJECT
    return RoniVerdict.ACCEPT


def roni_filter(global_model: ModelState, update: LocalUpdate, validation: Dataset,
                epsilon: float, *, baseline_correct: int | None = None) -> RoniVerdict:
    """Reject on negative influence.

    ``baseline_correct`` lets a caller screening many updates against the
    same global model reuse the without-update validation count.
    """
    if len(validation) == 0:
        raise ValueError("empty validation set")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    n = len(validation)
    if baseline_correct is None:
        baseline_correct = correct_count(global_model, validation)
    with_update = correct_count(global_model + update.delta, validation)
    return roni_decision(with_update / n, baseline_correct / n, epsilon)
