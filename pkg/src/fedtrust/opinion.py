"""Subjective-logic opinions for worker reputation.

An opinion is a (belief, distrust, uncertainty) triple on the unit simplex.
Publishers form local opinions from weighted interaction counts, fuse the
opinions recommended by other publishers, and combine both with the
consensus operator. The scalar reputation is ``belief + gamma * uncertainty``.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Hashable, Iterable, Sequence
from dataclasses import dataclass

SIMPLEX_TOL = 1e-9


class AllZeroWeights(ValueError):
    """No recommendation carries positive weight."""


@dataclass(frozen=True)
class Opinion:
    belief: float
    distrust: float
    uncertainty: float

    def __post_init__(self) -> None:
        for name in ("belief", "distrust", "uncertainty"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v!r}")
        total = self.belief + self.distrust + self.uncertainty
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"opinion components sum to {total!r}, expected 1")

    @classmethod
    def vacuous(cls) -> Opinion:
        return cls(0.0, 0.0, 1.0)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.belief, self.distrust, self.uncertainty)


VACUOUS = Opinion.vacuous()


class Outcome(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class InteractionRecord:
    publisher_id: Hashable
    worker_id: Hashable
    task_index: int
    outcome: Outcome
    link_failure_prob: float

    def __post_init__(self) -> None:
        if self.task_index < 0:
            raise ValueError("task_index must be non-negative")
        if not (0.0 <= self.link_failure_prob <= 1.0):
            raise ValueError("link_failure_prob must be in [0, 1]")


@dataclass(frozen=True)
class WeightConfig:
    """Weights of the multi-weight model.

    ``recency_window`` is measured in task indices: a record is recent iff
    ``now - task_index < recency_window``.
    """

    gamma: float = 0.5
    w_recent: float = 0.8
    w_past: float = 0.2
    rho_pos: float = 0.4
    rho_neg: float = 0.6
    recency_window: int = 3

    def __post_init__(self) -> None:
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must be in [0, 1]")
        if self.rho_pos <= 0 or self.rho_neg <= 0:
            raise ValueError("effect weights must be positive")
        if not (0 <= self.w_recent <= 1 and 0 <= self.w_past <= 1):
            raise ValueError("timeliness weights must be in [0, 1]")
        if abs(self.w_recent + self.w_past - 1.0) > SIMPLEX_TOL:
            raise ValueError("w_recent + w_past must equal 1")
        if self.recency_window < 1:
            raise ValueError("recency_window must be a positive integer")

    @classmethod
    def traditional(cls, gamma: float = 0.5, recency_window: int = 3) -> WeightConfig:
        """Degenerate config: no timeliness or effect differentiation."""
        return cls(gamma=gamma, w_recent=0.5, w_past=0.5, rho_pos=1.0, rho_neg=1.0,
                   recency_window=recency_window)

    def is_recent(self, task_index: int, now: int) -> bool:
        return now - task_index < self.recency_window

    def timeliness(self, task_index: int, now: int) -> float:
        return self.w_recent if self.is_recent(task_index, now) else self.w_past


@dataclass(frozen=True)
class ReputationScore:
    worker_id: Hashable
    value: float
    opinion: Opinion
    computed_at: int


def weighted_counts(records: Iterable[InteractionRecord], now: int,
                    cfg: WeightConfig) -> tuple[float, float]:
    """Timeliness- and effect-weighted positive/negative counts."""
    pos_recent = pos_past = neg_recent = neg_past = 0
    for r in records:
        if r.task_index > now:
            raise ValueError(f"record at task {r.task_index} is later than now={now}")
        recent = cfg.is_recent(r.task_index, now)
        if r.outcome is Outcome.POSITIVE:
            if recent:
                pos_recent += 1
            else:
                pos_past += 1
        elif recent:
            neg_recent += 1
        else:
            neg_past += 1
    alpha = cfg.rho_pos * (cfg.w_recent * pos_recent + cfg.w_past * pos_past)
    beta = cfg.rho_neg * (cfg.w_recent * neg_recent + cfg.w_past * neg_past)
    return alpha, beta


def opinion_from_counts(alpha: float, beta: float, link_failure: float) -> Opinion:
    if not (0.0 <= link_failure <= 1.0):
        raise ValueError("link_failure must be in [0, 1]")
    total = alpha + beta
    if total <= 0:
        return VACUOUS
    u = link_failure
    belief = (1.0 - u) * (alpha / total)
    distrust = (1.0 - u) * (beta / total)
    # Absorb the last-ulp rounding into uncertainty so the triple stays on the simplex.
    return Opinion(belief, distrust, max(0.0, 1.0 - belief - distrust))


def local_opinion(records: Sequence[InteractionRecord], now: int, cfg: WeightConfig,
                  link_failure: float) -> Opinion:
    # Effect weights enter only through their ratio, so normalise them first:
    # equal rho values then give bit-identical results to the unweighted model.
    rho_sum = cfg.rho_pos + cfg.rho_neg
    norm = WeightConfig(gamma=cfg.gamma, w_recent=cfg.w_recent, w_past=cfg.w_past,
                        rho_pos=cfg.rho_pos / rho_sum, rho_neg=cfg.rho_neg / rho_sum,
                        recency_window=cfg.recency_window)
    alpha, beta = weighted_counts(records, now, norm)
    return opinion_from_counts(alpha, beta, link_failure)


def mean_link_failure(records: Sequence[InteractionRecord]) -> float:
    """Mean packet-loss probability over ``records``; 0 for an empty history."""
    if not records:
        return 0.0
    return math.fsum(r.link_failure_prob for r in records) / len(records)


def reputation_value(op: Opinion, gamma: float) -> float:
    if not (0.0 <= gamma <= 1.0):
        raise ValueError("gamma must be in [0, 1]")
    return min(1.0, op.belief + gamma * op.uncertainty)


def frequency_weight(n_with_worker: float, mean_with_others: float) -> float:
    if n_with_worker < 0 or mean_with_others < 0:
        raise ValueError("interaction counts must be non-negative")
    if mean_with_others == 0:
        return 1.0
    return min(1.0, n_with_worker / mean_with_others)


def fuse_recommended(opinions: Iterable[tuple[Opinion, float]]) -> Opinion:
    """Weighted arithmetic mean of recommended opinions, component-wise.

    Raises
    ------
    AllZeroWeights
        If the input is empty or no entry has positive weight.
    """
    entries = [(op, w) for op, w in opinions]
    if any(w < 0 or not math.isfinite(w) for _, w in entries):
        raise ValueError("recommendation weights must be finite and non-negative")
    total = math.fsum(w for _, w in entries)
    if total <= 0:
        raise AllZeroWeights("no recommendation with positive weight")
    norm = [(op, w / total) for op, w in entries if w > 0]
    if len(norm) == 1:
        return norm[0][0]
    b = math.fsum(w * op.belief for op, w in norm)
    d = math.fsum(w * op.distrust for op, w in norm)
    u = math.fsum(w * op.uncertainty for op, w in norm)
    return _renormalise(b, d, u)


def combine_opinions(local: Opinion, recommended: Opinion) -> Opinion:
    """Consensus of a local and a recommended opinion.

    Falls back to the plain average when both opinions are dogmatic
    (uncertainty 0), where the consensus operator is undefined.
    """
    ul, ur = local.uncertainty, recommended.uncertainty
    if ur == 1.0:
        return local
    if ul == 1.0:
        return recommended
    kappa = ul + ur - ul * ur
    if kappa == 0.0:
        return _renormalise((local.belief + recommended.belief) / 2,
                            (local.distrust + recommended.distrust) / 2,
                            (ul + ur) / 2)
    b = (local.belief * ur + recommended.belief * ul) / kappa
    d = (local.distrust * ur + recommended.distrust * ul) / kappa
    u = ul * ur / kappa
    return _renormalise(b, d, u)


def _renormalise(b: float, d: float, u: float) -> Opinion:
    b = min(max(b, 0.0), 1.0)
    d = min(max(d, 0.0), 1.0)
    u = min(max(u, 0.0), 1.0)
    total = b + d + u
    if abs(total - 1.0) > SIMPLEX_TOL:
        b, d, u = b / total, d / total, u / total
    return Opinion(b, d, u)
