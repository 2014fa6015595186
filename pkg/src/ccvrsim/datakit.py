"""Labeled datasets and their non-IID split across clients.

Non-IID partitions follow the usual label-skew recipe: for every class a
proportion vector is drawn from a symmetric Dirichlet over the clients and
the (shuffled) class members are handed out in contiguous blocks.  Smaller
concentration means more heterogeneous clients.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgumentError

logger = logging.getLogger(__name__)

# Equidistant class centres sit this many units apart per unit of
# cluster_spread; within-class noise is unit isotropic.
CENTER_GAP = 10.0

_DATA_MAGIC = b"CCVRDATA"
_DATA_VERSION = 1
_DATA_HEADER = struct.Struct("<8sIQQI")


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus integer labels in ``[0, class_count)``."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if features.ndim != 2:
            raise ArgumentError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ArgumentError(
                f"label count {labels.shape} does not match feature rows {features.shape[0]}"
            )
        if self.class_count < 1:
            raise ArgumentError("class_count must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ArgumentError(f"labels must lie in [0, {self.class_count})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class Partition:
    """Disjoint assignment of training-sample indices to clients."""

    assignments: tuple[np.ndarray, ...]
    alpha: float | None = None
    seed: int | None = None
    repairs: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        frozen = []
        for a in self.assignments:
            arr = np.array(a, dtype=np.int64, copy=True)
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "assignments", tuple(frozen))

    @property
    def client_count(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments], dtype=np.int64)

    def validate(self, n: int) -> None:
        """Raise unless the lists are nonempty, disjoint and cover ``0..n-1``."""
        if any(len(a) == 0 for a in self.assignments):
            raise ArgumentError("partition contains an empty client")
        merged = np.concatenate(self.assignments) if self.assignments else np.array([], dtype=np.int64)
        if merged.size != n or not np.array_equal(np.sort(merged), np.arange(n)):
            raise ArgumentError(f"partition does not cover indices 0..{n - 1} exactly once")

    def to_json(self) -> str:
        payload = {
            "alpha": self.alpha,
            "seed": self.seed,
            "assignments": [a.tolist() for a in self.assignments],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        payload = json.loads(text)
        return cls(
            assignments=tuple(np.asarray(a, dtype=np.int64) for a in payload["assignments"]),
            alpha=payload.get("alpha"),
            seed=payload.get("seed"),
        )


def largest_remainder(weights: Sequence[float] | np.ndarray, total: int) -> np.ndarray:
    """Round ``total * weights / sum(weights)`` to integers summing to ``total``.

    Leftover units go to the largest fractional parts; ties favour the lower
    index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0:
        raise ArgumentError("total must be nonnegative")
    if w.size == 0:
        return np.zeros(0, dtype=np.int64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ArgumentError("weights must be finite and nonnegative")
    s = w.sum()
    if s <= 0:
        if total == 0:
            return np.zeros(w.size, dtype=np.int64)
        raise ArgumentError("weights sum to zero")
    quotas = w / s * total
    counts = np.floor(quotas).astype(np.int64)
    leftover = int(total - counts.sum())
    if leftover > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:leftover]] += 1
    return counts


def _blob_centers(class_count: int, input_dim: int, cluster_spread: float, rng: np.random.Generator) -> np.ndarray:
    gap = CENTER_GAP * cluster_spread
    if class_count <= input_dim:
        q, _ = np.linalg.qr(rng.standard_normal((input_dim, class_count)))
        return q.T * (gap / np.sqrt(2.0))
    dirs = rng.standard_normal((class_count, input_dim))
    diffs = dirs[:, None, :] - dirs[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    dmin = dist[np.triu_indices(class_count, 1)].min()
    return dirs * (gap / dmin)


def _check_blob_args(class_count: int, per_class: int, input_dim: int, cluster_spread: float) -> None:
    if class_count < 2:
        raise ArgumentError("class_count must be >= 2")
    if per_class < 1:
        raise ArgumentError("per_class must be >= 1")
    if input_dim < 2:
        raise ArgumentError("input_dim must be >= 2")
    if not cluster_spread > 0:
        raise ArgumentError("cluster_spread must be > 0")


def _draw_blobs(centers: np.ndarray, per_class: int, rng: np.random.Generator) -> Dataset:
    class_count, input_dim = centers.shape
    labels = np.repeat(np.arange(class_count), per_class)
    noise = rng.standard_normal((class_count * per_class, input_dim))
    return Dataset(centers[labels] + noise, labels, class_count)


def make_blob_splits(
    class_count: int,
    per_class: int,
    test_per_class: int,
    input_dim: int,
    cluster_spread: float,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Train and held-out test blobs sharing the same class centres."""
    _check_blob_args(class_count, per_class, input_dim, cluster_spread)
    if test_per_class < 1:
        raise ArgumentError("test_per_class must be >= 1")
    center_ss, train_ss, test_ss = np.random.SeedSequence(seed).spawn(3)
    centers = _blob_centers(class_count, input_dim, cluster_spread, np.random.default_rng(center_ss))
    train = _draw_blobs(centers, per_class, np.random.default_rng(train_ss))
    test = _draw_blobs(centers, test_per_class, np.random.default_rng(test_ss))
    return train, test


def make_blobs(class_count: int, per_class: int, input_dim: int, cluster_spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian classes with unit noise.

    Class centres are equidistant (when ``class_count <= input_dim``) at
    ``CENTER_GAP * cluster_spread`` apart, so ``cluster_spread`` is the
    separation knob: larger values give easier problems.  With more classes
    than dimensions the centres are random directions rescaled so the closest
    pair sits at that distance.
    """
    train, _ = make_blob_splits(class_count, per_class, 1, input_dim, cluster_spread, seed)
    return train


def dirichlet_proportions(class_count: int, client_count: int, alpha: float, seed: int) -> np.ndarray:
    """Per-class client proportions, shape ``(class_count, client_count)``."""
    if not alpha > 0:
        raise ArgumentError("alpha must be > 0")
    if client_count < 1:
        raise ArgumentError("client_count must be >= 1")
    prop_ss, _ = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(prop_ss)
    return rng.dirichlet(np.full(client_count, float(alpha)), size=class_count)


def _repair_empty(lists: list[list[int]]) -> int:
    repairs = 0
    for k in range(len(lists)):
        if lists[k]:
            continue
        donor = max(range(len(lists)), key=lambda j: (len(lists[j]), -j))
        if len(lists[donor]) < 2:
            raise ArgumentError("not enough samples to give every client at least one")
        lists[k].append(lists[donor].pop())
        repairs += 1
        logger.warning("client %d received no samples; moved one from client %d", k, donor)
    return repairs


def partition_dirichlet(
    ds: Dataset,
    client_count: int,
    alpha: float,
    seed: int,
    proportions: np.ndarray | None = None,
) -> Partition:
    """Label-skewed split of ``ds`` across ``client_count`` clients.

    Args:
        ds: Training set to split.
        client_count: Number of clients K.
        alpha: Dirichlet concentration; must be positive.
        seed: Drives both the proportion draws and the per-class shuffles.
        proportions: Optional ``(C, K)`` matrix used instead of sampling.

    Returns:
        A Partition whose client index lists are sorted ascending.
    """
    if not alpha > 0:
        raise ArgumentError("alpha must be > 0")
    if client_count < 1:
        raise ArgumentError("client_count must be >= 1")
    if proportions is None:
        proportions = dirichlet_proportions(ds.class_count, client_count, alpha, seed)
    proportions = np.asarray(proportions, dtype=np.float64)
    if proportions.shape != (ds.class_count, client_count):
        raise ArgumentError(f"proportions must have shape {(ds.class_count, client_count)}")

    _, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(shuffle_ss)
    lists: list[list[int]] = [[] for _ in range(client_count)]
    for c in range(ds.class_count):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        counts = largest_remainder(proportions[c], members.size)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in range(client_count):
            lists[k].extend(members[bounds[k]:bounds[k + 1]].tolist())

    repairs = _repair_empty(lists)
    return Partition(tuple(np.sort(np.asarray(a, dtype=np.int64)) for a in lists), float(alpha), seed, repairs)


def partition_iid(ds: Dataset, client_count: int, seed: int) -> Partition:
    """Uniformly random split into near-equal shards."""
    if client_count < 1:
        raise ArgumentError("client_count must be >= 1")
    if client_count > len(ds):
        raise ArgumentError("more clients than samples")
    order = np.random.default_rng(seed).permutation(len(ds))
    return Partition(tuple(np.sort(s) for s in np.array_split(order, client_count)), None, seed)


def label_histogram(ds: Dataset, part: Partition) -> np.ndarray:
    """``(K, C)`` matrix of per-client class counts."""
    hist = np.zeros((part.client_count, ds.class_count), dtype=np.int64)
    for k, idx in enumerate(part.assignments):
        hist[k] = np.bincount(ds.labels[idx], minlength=ds.class_count)
    return hist


def split_validation(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out a seeded random ``fraction`` of ``ds`` for validation."""
    if not 0 < fraction < 1:
        raise ArgumentError("validation fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_val = int(round(fraction * len(ds)))
    return ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val]))


def save_dataset(path: str | Path, ds: Dataset) -> None:
    n, d = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(_DATA_HEADER.pack(_DATA_MAGIC, _DATA_VERSION, n, d, ds.class_count))
        fh.write(ds.features.astype("<f8").tobytes(order="C"))
        fh.write(ds.labels.astype("<i8").tobytes(order="C"))


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _DATA_HEADER.size:
        raise ArgumentError(f"{path}: truncated dataset header")
    magic, version, n, d, c = _DATA_HEADER.unpack_from(raw)
    if magic != _DATA_MAGIC or version != _DATA_VERSION:
        raise ArgumentError(f"{path}: not a version-{_DATA_VERSION} dataset file")
    expected = _DATA_HEADER.size + 8 * n * d + 8 * n
    if len(raw) != expected:
        raise ArgumentError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _DATA_HEADER.size
    features = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=off + 8 * n * d)
    return Dataset(features, labels, c)


def load_csv(path: str | Path, class_count: int | None = None) -> Dataset:
    """Read a CSV whose last column is the integer label; a header row is skipped."""
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                values = [float(v) for v in row]
            except ValueError:
                if i == 0:
                    continue
                raise ArgumentError(f"{path}:{i + 1}: non-numeric field")
            rows.append(values[:-1])
            labels.append(int(values[-1]))
    if not rows:
        raise ArgumentError(f"{path}: no data rows")
    lab = np.asarray(labels, dtype=np.int64)
    return Dataset(np.asarray(rows), lab, class_count if class_count is not None else int(lab.max()) + 1)
