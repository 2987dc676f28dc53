"""Multinomial logistic regression trained by local SGD and federated averaging."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .data import Dataset, rng_for


class EmptyShard(ValueError):
    pass


class EmptyAccepted(ValueError):
    """No update survived screening, so the round has nothing to aggregate."""


@dataclass(frozen=True, eq=False)
class ModelState:
    weights: np.ndarray  # (n_classes, n_features)
    bias: np.ndarray  # (n_classes,)

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (C, F) and bias (C,)")

    @classmethod
    def zeros(cls, n_classes: int, n_features: int) -> ModelState:
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def __add__(self, other: ModelState) -> ModelState:
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        return ModelState(self.weights + other.weights, self.bias + other.bias)

    def __sub__(self, other: ModelState) -> ModelState:
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        return ModelState(self.weights - other.weights, self.bias - other.bias)

    def scaled(self, factor: float) -> ModelState:
        return ModelState(self.weights * factor, self.bias * factor)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all() and np.isfinite(self.bias).all())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_flat(cls, vec: np.ndarray, n_classes: int, n_features: int) -> ModelState:
        w = vec[: n_classes * n_features].reshape(n_classes, n_features)
        return cls(w.copy(), vec[n_classes * n_features:].copy())


def init_model(n_classes: int, n_features: int, seed: int, scale: float = 0.01) -> ModelState:
    """Random initial model with entries uniform in [-scale, scale]."""
    rng = rng_for(seed, "init")
    return ModelState(rng.uniform(-scale, scale, (n_classes, n_features)),
                      rng.uniform(-scale, scale, n_classes))


@dataclass(frozen=True, eq=False)
class LocalUpdate:
    worker_id: str
    delta: ModelState
    claimed_elapsed: float
    claimed_data_size: int

    def __post_init__(self) -> None:
        if self.claimed_elapsed < 0 or self.claimed_data_size < 0:
            raise ValueError("claimed elapsed time and data size must be non-negative")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _logit_grad(w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray]:
    """Shifted logits and d(mean loss)/d(logits) for a batch."""
    shifted = x @ w.T + b
    shifted -= shifted.max(axis=1, keepdims=True)
    g = np.exp(shifted)
    g /= g.sum(axis=1, keepdims=True)
    g[np.arange(len(y)), y] -= 1.0
    g /= len(y)
    return shifted, g


def loss_and_grad(model: ModelState, x: np.ndarray, y: np.ndarray) -> tuple[float, ModelState]:
    """Mean softmax cross-entropy and its gradient."""
    shifted, g = _logit_grad(model.weights, model.bias, x, y)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(len(y)), y]))
    return loss, ModelState(g.T @ x, g.sum(axis=0))


def local_sgd(model: ModelState, shard: Dataset, batch_size: int, n_batches: int, lr: float,
              seed: int, *, worker_id: str = "", compute_rate: float = 1.0,
              fraction_trained: float = 1.0) -> LocalUpdate:
    """Run ``n_batches`` mini-batch SGD steps starting from ``model``.

    Mini-batches are drawn from the part of the shard the worker actually
    trains on: all of it, or a ``fraction_trained`` subset for a lazy
    worker. The simulated clock charges ``compute_rate`` per example in that
    subset, while the reported data size is always the full shard.
    """
    if len(shard) == 0:
        raise EmptyShard(worker_id or "shard is empty")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    rng = rng_for(seed, "sgd", worker_id)
    n = len(shard)
    if fraction_trained < 1.0:
        pool = rng.permutation(n)[: max(1, math.ceil(fraction_trained * n))]
    else:
        pool = np.arange(n)
    w = model.weights.copy()
    b = model.bias.copy()
    replace = len(pool) < batch_size
    for _ in range(n_batches):
        idx = pool[rng.choice(len(pool), size=batch_size, replace=replace)]
        x = shard.features[idx]
        _, g = _logit_grad(w, b, x, shard.labels[idx])
        w -= lr * (g.T @ x)
        b -= lr * g.sum(axis=0)
    delta = ModelState(w - model.weights, b - model.bias)
    return LocalUpdate(worker_id, delta, compute_rate * len(pool), n)


def aggregate(global_model: ModelState, accepted: Sequence[LocalUpdate]) -> ModelState:
    """Global model plus the mean of the accepted deltas."""
    if not accepted:
        raise EmptyAccepted("no accepted updates")
    # fixed summation order keeps the result independent of arrival order
    accepted = sorted(accepted, key=lambda u: (u.worker_id, u.delta.flat().tobytes()))
    dw = np.mean(np.stack([u.delta.weights for u in accepted]), axis=0)
    db = np.mean(np.stack([u.delta.bias for u in accepted]), axis=0)
    new = ModelState(global_model.weights + dw, global_model.bias + db)
    if not new.is_finite():
        raise FloatingPointError("aggregated model is not finite")
    return new


def predict(model: ModelState, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(x @ model.weights.T + model.bias, axis=1)


def correct_count(model: ModelState, test: Dataset) -> int:
    return int(np.count_nonzero(predict(model, test.features) == test.labels))


def evaluate(model: ModelState, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return correct_count(model, test) / len(test)

