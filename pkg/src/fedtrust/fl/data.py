"""Datasets, worker behaviours, non-IID partitioning and label poisoning."""

from __future__ import annotations

import gzip
import math
import struct
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class InvalidDims(ValueError):
    pass


class IdxError(ValueError):
    pass


class BadMagic(IdxError):
    pass


class TruncatedFile(IdxError):
    pass


class CountMismatch(IdxError):
    pass


class LengthMismatch(ValueError):
    pass


class InsufficientData(ValueError):
    pass


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by a base seed plus any mix of ints and strings."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, (int, np.integer)):
            entropy.append(int(k) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(k).encode()))
    return np.random.default_rng(entropy)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise InvalidDims("features must be a 2-d array")
        if len(self.features) != len(self.labels):
            raise InvalidDims("features and labels differ in length")
        if self.n_classes < 1:
            raise InvalidDims("n_classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvalidDims("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def label_distribution(self) -> np.ndarray:
        return label_distribution(self.labels, self.n_classes)

    def split(self, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
        """Stratified split; returns (held_out, rest) with ``fraction`` held out."""
        rng = rng_for(seed, "split")
        held = []
        for c in range(self.n_classes):
            idx = np.flatnonzero(self.labels == c)
            rng.shuffle(idx)
            held.append(idx[: int(round(fraction * len(idx)))])
        held_idx = np.sort(np.concatenate(held))
        mask = np.ones(len(self), dtype=bool)
        mask[held_idx] = False
        return self.subset(held_idx), self.subset(np.flatnonzero(mask))


def label_distribution(labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    return counts / counts.sum()


def gen_synthetic(n_examples: int, n_classes: int, n_features: int, separation: float,
                  seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, one per class.

    Class means sit on scaled coordinate axes so every pair of means is
    exactly ``separation`` apart; this needs ``n_features >= n_classes``.
    Labels are balanced to within one example per class.
    """
    if n_classes < 2:
        raise InvalidDims("need at least two classes")
    if n_features < n_classes:
        raise InvalidDims("n_features must be >= n_classes")
    if n_examples < 1:
        raise InvalidDims("n_examples must be positive")
    if not separation > 0:
        raise InvalidDims("separation must be positive")
    rng = rng_for(seed, "synthetic")
    means = np.zeros((n_classes, n_features))
    means[np.arange(n_classes), np.arange(n_classes)] = separation / math.sqrt(2.0)
    labels = rng.permutation(np.arange(n_examples) % n_classes)
    features = means[labels] + rng.standard_normal((n_examples, n_features))
    return Dataset(features, labels.astype(np.int64), n_classes)


def class_means(ds: Dataset) -> np.ndarray:
    return np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(ds.n_classes)])


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _idx_header(raw: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagic(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < need:
        raise TruncatedFile(f"{path}: header truncated")
    return struct.unpack(f">{ndims}I", raw[4:need])


def load_idx(images_path: str | Path, labels_path: str | Path,
             n_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair (MNIST layout), pixels scaled to [0, 1]."""
    img_raw = _read_bytes(images_path)
    lab_raw = _read_bytes(labels_path)
    count, rows, cols = _idx_header(img_raw, IDX_IMAGES_MAGIC, 3, images_path)
    (n_labels,) = _idx_header(lab_raw, IDX_LABELS_MAGIC, 1, labels_path)
    if count != n_labels:
        raise CountMismatch(f"{count} images but {n_labels} labels")
    body = img_raw[16:]
    if len(body) < count * rows * cols:
        raise TruncatedFile(f"{images_path}: expected {count * rows * cols} pixel bytes")
    if len(lab_raw) - 8 < n_labels:
        raise TruncatedFile(f"{labels_path}: expected {n_labels} label bytes")
    pixels = np.frombuffer(body, dtype=np.uint8, count=count * rows * cols)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n_labels else 1
    return Dataset(features, labels, n_classes)


def write_idx(images_path: str | Path, labels_path: str | Path, images: np.ndarray,
              labels: np.ndarray) -> None:
    """Write uint8 images (count, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(
        struct.pack(">4I", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def emd(shard_dist: Sequence[float], global_dist: Sequence[float]) -> float:
    """Label-distribution distance: sum over classes of |p_i - q_i|, in [0, 2]."""
    p = np.asarray(shard_dist, dtype=float)
    q = np.asarray(global_dist, dtype=float)
    if p.shape != q.shape:
        raise LengthMismatch(f"distributions have shapes {p.shape} and {q.shape}")
    for name, v in (("shard", p), ("global", q)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} distribution is not a probability vector")
    return float(np.abs(p - q).sum())


# -- worker behaviours -------------------------------------------------------

@dataclass(frozen=True)
class Honest:
    pass


@dataclass(frozen=True)
class Poisoner:
    attack_strength: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.attack_strength <= 1.0):
            raise ValueError("attack_strength must be in [0, 1]")


@dataclass(frozen=True)
class Unreliable:
    classes_held: int

    def __post_init__(self) -> None:
        if self.classes_held < 1:
            raise ValueError("classes_held must be positive")


@dataclass(frozen=True)
class Lazy:
    fraction_trained: float

    def __post_init__(self) -> None:
        if not (0.0 < self.fraction_trained < 1.0):
            raise ValueError("fraction_trained must be in (0, 1)")


Behavior = Honest | Poisoner | Unreliable | Lazy


@dataclass(frozen=True, eq=False)
class WorkerProfile:
    worker_id: str
    behavior: Behavior
    shard: Dataset | None = None

    def __post_init__(self) -> None:
        if (isinstance(self.behavior, Unreliable) and self.shard is not None
                and self.behavior.classes_held > self.shard.n_classes):
            raise ValueError("classes_held exceeds the number of classes")

    def with_shard(self, shard: Dataset) -> WorkerProfile:
        return replace(self, shard=shard)


def _spread(total: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``total`` into ``k`` parts differing by at most one; extras at random."""
    parts = np.full(k, total // k, dtype=int)
    parts[rng.choice(k, size=total % k, replace=False)] += 1
    return parts


def partition(ds: Dataset, profiles: Sequence[WorkerProfile], seed: int,
              shard_size: int | None = None) -> list[WorkerProfile]:
    """Assign disjoint shards to workers.

    Honest, poisoning and lazy workers receive a stratified shard whose
    label distribution matches the uniform class mix. An ``Unreliable(k)``
    worker receives examples from ``k`` randomly chosen classes in equal
    parts. Without ``shard_size`` the whole dataset is split evenly.
    """
    if not profiles:
        raise ValueError("no worker profiles")
    n_workers, n_classes = len(profiles), ds.n_classes
    if shard_size is None:
        sizes = [len(ds) // n_workers + (i < len(ds) % n_workers) for i in range(n_workers)]
    else:
        sizes = [shard_size] * n_workers
    if sum(sizes) > len(ds):
        raise InsufficientData(f"{sum(sizes)} examples requested, {len(ds)} available")
    rng = rng_for(seed, "partition")
    pools = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(n_classes)]

    # Stratified workers deal consecutive chunks from an interleaving of the
    # class pools, so every chunk follows the global label mix and no class
    # is over-drawn.
    stratified = [i for i, prof in enumerate(profiles)
                  if not (isinstance(prof.behavior, Unreliable)
                          and prof.behavior.classes_held < n_classes)]
    skewed = [i for i in range(n_workers) if i not in set(stratified)]
    offsets = rng.random(n_classes)
    keys = np.concatenate([(np.arange(len(p)) + offsets[c]) / max(len(p), 1)
                           for c, p in enumerate(pools)])
    order = np.concatenate(pools)[np.argsort(keys, kind="stable")]
    shards: dict[int, np.ndarray] = {}
    cursor = 0
    for i in stratified:
        shards[i] = order[cursor:cursor + sizes[i]]
        cursor += sizes[i]
    used = np.zeros(len(ds), dtype=bool)
    used[order[:cursor]] = True
    left = [p[~used[p]] for p in pools]

    for i in skewed:
        k = profiles[i].behavior.classes_held
        per_class = _spread(sizes[i], k, rng)
        free = np.array([len(p) for p in left])
        eligible = np.flatnonzero(free >= per_class.max())
        if len(eligible) < k:
            raise InsufficientData(f"not enough examples for {profiles[i].worker_id}")
        chosen = np.sort(rng.choice(eligible, size=k, replace=False))
        parts = []
        for c, q in zip(chosen, per_class):
            parts.append(left[c][:q])
            left[c] = left[c][q:]
        shards[i] = np.concatenate(parts)

    return [prof.with_shard(ds.subset(rng.permutation(shards[i])))
            for i, prof in enumerate(profiles)]


def poison_count(strength: float, n: int) -> int:
    """Examples relabelled at a given strength: round half up of strength * n."""
    return int(math.floor(strength * n + 0.5))


def poison(shard: Dataset, attack_strength: float, seed: int) -> Dataset:
    """Relabel a fixed fraction of examples to a uniformly random other class."""
    if not (0.0 <= attack_strength <= 1.0):
        raise ValueError("attack_strength must be in [0, 1]")
    m = poison_count(attack_strength, len(shard))
    if m == 0:
        return shard
    rng = rng_for(seed, "poison")
    idx = rng.choice(len(shard), size=m, replace=False)
    labels = shard.labels.copy()
    labels[idx] = (labels[idx] + rng.integers(1, shard.n_classes, size=m)) % shard.n_classes
    return Dataset(shard.features, labels, shard.n_classes)
