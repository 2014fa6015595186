"""Classifier calibration from virtual representations.

After federated training the extractor is frozen.  Each client summarizes
its features per class as ``(count, mean, unbiased covariance)``; the
server merges these into exact global per-class Gaussians, draws virtual
features from them, and retrains only the classifier on the draws.  Raw
features never leave a client: the server half of the pipeline accepts
nothing but :class:`ClassStats` records.

The merge uses the identity ``(n - 1) S = sum z z^T - n m m^T``, valid for
``n >= 1``, summed over clients.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datakit import Dataset, Partition, largest_remainder
from .errors import ArgumentError, DegenerateCovarianceError, EmptyClassError
from .neuralcore import ModelParams, forward_features, retrain_classifier
from .transform import TransformCfg, transform_features

logger = logging.getLogger(__name__)

JITTERS = (1e-8, 1e-6, 1e-4)
DEGENERATE_COV_SCALE = 1e-4

_STATS_MAGIC = b"CCVRSTAT"
_STATS_VERSION = 1
_STATS_HEADER = struct.Struct("<8sIBIQ")
_LOCAL_RECORD = struct.Struct("<IIQ")
_GLOBAL_RECORD = struct.Struct("<IQ")
_LOCAL, _GLOBAL = 0, 1


@dataclass(frozen=True)
class ClassStats:
    """One client's summary of one class: the only thing a client uploads."""

    client_id: int
    class_id: int
    count: int
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ArgumentError("count must be nonnegative")
        mean = np.array(self.mean, dtype=np.float64)
        cov = np.array(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ArgumentError("mean must be (d,) and cov (d, d)")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return int(self.mean.size)


@dataclass(frozen=True)
class GlobalClassStats:
    class_id: int
    count: int
    mean: np.ndarray
    cov: np.ndarray

    @property
    def degenerate(self) -> bool:
        """True when a single sample leaves the covariance undefined."""
        return self.count < 2

    @property
    def dim(self) -> int:
        return int(self.mean.size)


@dataclass
class VirtualSet:
    """Labelled virtual features, already in the classifier's input space.

    ``transform`` is what inference must apply to real extractor outputs so
    they land in the same space.
    """

    features: np.ndarray
    labels: np.ndarray
    transform: TransformCfg | None = None

    def counts(self, class_count: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=class_count)


@dataclass(frozen=True)
class RetrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ArgumentError("invalid retraining configuration")


@dataclass
class CcvrResult:
    model: ModelParams
    global_stats: list[GlobalClassStats]
    counts: dict[int, int]
    uploads: list[ClassStats] = field(default_factory=list)


def local_class_stats(
    z: np.ndarray,
    y: np.ndarray,
    class_count: int,
    client_id: int = 0,
    transform: TransformCfg | None = None,
) -> list[ClassStats]:
    """Per-class count, mean and unbiased covariance of one client's features.

    Classes absent from the client get a zero-count record; one-sample
    classes get a zero covariance.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ArgumentError("features must be (n, d) with one label per row")
    if transform is not None:
        z = transform_features(z, transform)
    d = z.shape[1]
    out = []
    for c in range(class_count):
        zc = z[y == c]
        n = zc.shape[0]
        mean = zc.mean(axis=0) if n else np.zeros(d)
        if n >= 2:
            diff = zc - mean
            cov = diff.T @ diff / (n - 1)
        else:
            cov = np.zeros((d, d))
        out.append(ClassStats(client_id, c, n, mean, cov))
    return out


def merge_class_stats(stats: Sequence[ClassStats]) -> GlobalClassStats:
    """Exact global mean and unbiased covariance of one class from client summaries.

    ``mu = sum (n_k / N) mu_k`` and
    ``Sigma = sum (n_k - 1)/(N - 1) Sigma_k + sum n_k/(N - 1) mu_k mu_k^T - N/(N - 1) mu mu^T``.
    Records are reduced in client-id order; zero-count clients are skipped.
    """
    if not stats:
        raise EmptyClassError("no statistics to merge")
    class_ids = {s.class_id for s in stats}
    if len(class_ids) != 1:
        raise ArgumentError(f"records span several classes: {sorted(class_ids)}")
    dims = {s.dim for s in stats}
    if len(dims) != 1:
        raise ArgumentError("records disagree on feature dimension")
    c, d = class_ids.pop(), dims.pop()
    ordered = sorted((s for s in stats if s.count > 0), key=lambda s: s.client_id)
    total = sum(s.count for s in ordered)
    if total == 0:
        raise EmptyClassError(f"class {c} has no samples on any client")

    mean = np.zeros(d)
    for s in ordered:
        mean += (s.count / total) * s.mean
    if total == 1:
        return GlobalClassStats(c, 1, mean, np.zeros((d, d)))

    # accumulate the pooled scatter matrix, divide once
    scatter = np.zeros((d, d))
    for s in ordered:
        scatter += (s.count - 1) * s.cov
        scatter += s.count * np.outer(s.mean, s.mean)
    scatter -= total * np.outer(mean, mean)
    cov = scatter / (total - 1)
    cov = 0.5 * (cov + cov.T)
    return GlobalClassStats(c, total, mean, cov)


def merge_uploads(uploads: Iterable[ClassStats], class_count: int) -> list[GlobalClassStats]:
    """Merge every class; classes nobody holds are dropped with a warning."""
    by_class: dict[int, list[ClassStats]] = {c: [] for c in range(class_count)}
    for s in uploads:
        if not isinstance(s, ClassStats):
            raise TypeError(f"server accepts ClassStats records only, got {type(s).__name__}")
        if not 0 <= s.class_id < class_count:
            raise ArgumentError(f"class id {s.class_id} out of range")
        by_class[s.class_id].append(s)
    merged = []
    for c in range(class_count):
        if sum(s.count for s in by_class[c]) == 0:
            logger.warning("class %d has no samples on any client; excluded from calibration", c)
            continue
        merged.append(merge_class_stats(by_class[c]))
    return merged


def allocate_counts(stats: Sequence[GlobalClassStats], mode: str, m: int) -> dict[int, int]:
    """Virtual sample count per class.

    ``fixed``: ``m`` for every class present.  ``proportional``: ``m`` split
    in proportion to class frequency by largest-remainder rounding.
    """
    if m < 0:
        raise ArgumentError("sample count must be nonnegative")
    if mode == "fixed":
        return {g.class_id: (m if g.count >= 1 else 0) for g in stats}
    if mode == "proportional":
        counts = np.array([g.count for g in stats], dtype=np.float64)
        if counts.sum() == 0:
            return {g.class_id: 0 for g in stats}
        alloc = largest_remainder(counts, m)
        return {g.class_id: int(a) for g, a in zip(stats, alloc)}
    raise ArgumentError(f"unknown allocation mode {mode!r}")


def _cholesky_with_jitter(cov: np.ndarray) -> np.ndarray:
    d = cov.shape[0]
    sym = 0.5 * (cov + cov.T)
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(sym + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            continue
    raise DegenerateCovarianceError(f"covariance not positive definite after jitter {JITTERS[-1]}")


def sample_virtual(g: GlobalClassStats, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` features from ``N(mean, cov)`` via a jittered Cholesky factor.

    The stream is keyed by ``(seed, class_id)``.  Single-sample classes use
    a small isotropic covariance around the mean.
    """
    if count < 0:
        raise ArgumentError("count must be nonnegative")
    d = g.dim
    if count == 0:
        return np.zeros((0, d))
    cov = DEGENERATE_COV_SCALE * np.eye(d) if g.degenerate else g.cov
    chol = _cholesky_with_jitter(cov)
    eps = np.random.default_rng([seed, g.class_id]).standard_normal((count, d))
    return g.mean + eps @ chol.T


def generate_virtual_set(
    stats: Sequence[GlobalClassStats],
    counts: dict[int, int],
    seed: int,
    transform: TransformCfg | None = None,
    post_transform: bool = False,
) -> VirtualSet:
    """Concatenate per-class draws into one labelled set.

    With ``post_transform`` the draws live in raw feature space and are
    pushed through ``transform`` afterwards.
    """
    d = stats[0].dim if stats else 0
    feats, labels = [np.zeros((0, d))], [np.zeros(0, dtype=np.int64)]
    for g in stats:
        n = counts.get(g.class_id, 0)
        feats.append(sample_virtual(g, n, seed))
        labels.append(np.full(n, g.class_id, dtype=np.int64))
    features = np.concatenate(feats)
    if post_transform and transform is not None:
        features = transform_features(features, transform)
    return VirtualSet(features, np.concatenate(labels), transform)


def _retrain(model: ModelParams, z: np.ndarray, y: np.ndarray, cfg: RetrainConfig, transform: TransformCfg | None) -> ModelParams:
    if cfg.epochs == 0 or len(y) == 0:
        return model
    if z.shape[1] != model.feature_dim:
        raise ArgumentError(f"features have dimension {z.shape[1]}, classifier expects {model.feature_dim}")
    calibrated = retrain_classifier(
        model.copy(),
        z,
        y,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        seed=cfg.seed,
    )
    calibrated.transform = transform
    return calibrated


def calibrate_ccvr(model: ModelParams, virtual: VirtualSet, cfg: RetrainConfig) -> ModelParams:
    """Retrain the classifier on virtual features, starting from its current weights.

    The extractor is untouched.  With nothing to train on (no samples or no
    epochs) the model comes back unchanged.
    """
    return _retrain(model, virtual.features, virtual.labels, cfg, virtual.transform)


def calibrate_oracle(
    model: ModelParams,
    z: np.ndarray,
    y: np.ndarray,
    cfg: RetrainConfig,
    *,
    transform: TransformCfg | None = TransformCfg(),
    per_class_cap: int | None = None,
    fraction: float | None = None,
    seed: int = 0,
) -> ModelParams:
    """Classifier retraining on pooled real features (simulation-only upper bound).

    ``z`` are raw extractor outputs for the whole training set.  Optionally
    keep at most ``per_class_cap`` samples per class or a ``fraction`` of
    each class, chosen by a seeded shuffle.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if per_class_cap is not None or fraction is not None:
        rng = np.random.default_rng(seed)
        keep = []
        for c in np.unique(y):
            members = rng.permutation(np.flatnonzero(y == c))
            n = members.size
            if per_class_cap is not None:
                n = min(n, per_class_cap)
            if fraction is not None:
                n = min(n, int(round(fraction * members.size)))
            keep.append(members[:n])
        idx = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
        z, y = z[idx], y[idx]
    if transform is not None:
        z = transform_features(z, transform)
    return _retrain(model, z, y, cfg, transform)


# -- client / server halves -------------------------------------------------


def client_upload(
    extractor: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    class_count: int,
    client_id: int,
    transform: TransformCfg | None,
) -> list[ClassStats]:
    """Client side: features from the broadcast extractor, summarized per class."""
    z = forward_features(extractor, x)
    return local_class_stats(z, y, class_count, client_id, transform)


def server_calibrate(
    model: ModelParams,
    uploads: Sequence[ClassStats],
    *,
    class_count: int,
    count_mode: str = "fixed",
    count: int = 100,
    retrain: RetrainConfig = RetrainConfig(),
    transform: TransformCfg | None = TransformCfg(),
    transform_before_stats: bool = True,
    seed: int = 0,
) -> CcvrResult:
    """Server side: merge uploads, sample virtual features, retrain the classifier."""
    merged = merge_uploads(uploads, class_count)
    counts = allocate_counts(merged, count_mode, count)
    virtual = generate_virtual_set(merged, counts, seed, transform, post_transform=not transform_before_stats)
    calibrated = calibrate_ccvr(model, virtual, retrain)
    return CcvrResult(calibrated, merged, counts, list(uploads))


def collect_uploads(
    model: ModelParams,
    ds: Dataset,
    part: Partition,
    transform: TransformCfg | None = TransformCfg(),
    transform_before_stats: bool = True,
) -> list[ClassStats]:
    extractor = model.extractor_only()
    stats_transform = transform if transform_before_stats else None
    uploads: list[ClassStats] = []
    for k, idx in enumerate(part.assignments):
        uploads.extend(
            client_upload(extractor, ds.features[idx], ds.labels[idx], ds.class_count, k, stats_transform)
        )
    return uploads


def run_ccvr_pipeline(
    model: ModelParams,
    ds: Dataset,
    part: Partition,
    transform: TransformCfg | None = TransformCfg(),
    count_mode: str = "fixed",
    count: int = 100,
    retrain: RetrainConfig = RetrainConfig(),
    seed: int = 0,
    transform_before_stats: bool = True,
) -> CcvrResult:
    """Broadcast extractor, gather per-client statistics, calibrate on the server."""
    uploads = collect_uploads(model, ds, part, transform, transform_before_stats)
    return server_calibrate(
        model,
        uploads,
        class_count=ds.class_count,
        count_mode=count_mode,
        count=count,
        retrain=retrain,
        transform=transform,
        transform_before_stats=transform_before_stats,
        seed=seed,
    )


# -- serialization ----------------------------------------------------------


def write_stats(path: str | Path, records: Sequence[ClassStats] | Sequence[GlobalClassStats], dim: int) -> None:
    """Binary stats file: header (magic, version, kind, d, n) then fixed-size records."""
    is_local = bool(records) and isinstance(records[0], ClassStats)
    parts = [_STATS_HEADER.pack(_STATS_MAGIC, _STATS_VERSION, _LOCAL if is_local else _GLOBAL, dim, len(records))]
    for r in records:
        if r.dim != dim:
            raise ArgumentError("record dimension does not match header")
        if is_local:
            parts.append(_LOCAL_RECORD.pack(r.client_id, r.class_id, r.count))
        else:
            parts.append(_GLOBAL_RECORD.pack(r.class_id, r.count))
        parts.append(np.ascontiguousarray(r.mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(r.cov, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_stats(path: str | Path) -> tuple[int, list[ClassStats] | list[GlobalClassStats]]:
    raw = Path(path).read_bytes()
    if len(raw) < _STATS_HEADER.size:
        raise ArgumentError(f"{path}: truncated stats header")
    magic, version, kind, d, n = _STATS_HEADER.unpack_from(raw)
    if magic != _STATS_MAGIC or version != _STATS_VERSION:
        raise ArgumentError(f"{path}: not a version-{_STATS_VERSION} stats file")
    rec = _LOCAL_RECORD if kind == _LOCAL else _GLOBAL_RECORD
    step = rec.size + 8 * (d + d * d)
    if len(raw) != _STATS_HEADER.size + n * step:
        raise ArgumentError(f"{path}: size does not match {n} records of dimension {d}")
    out = []
    off = _STATS_HEADER.size
    for _ in range(n):
        head = rec.unpack_from(raw, off)
        off += rec.size
        mean = np.frombuffer(raw, "<f8", d, off).astype(np.float64)
        off += 8 * d
        cov = np.frombuffer(raw, "<f8", d * d, off).reshape(d, d).astype(np.float64)
        off += 8 * d * d
        if kind == _LOCAL:
            out.append(ClassStats(head[0], head[1], head[2], mean, cov))
        else:
            out.append(GlobalClassStats(head[0], head[1], mean, cov))
    return d, out


def stats_to_json(records: Sequence[ClassStats] | Sequence[GlobalClassStats]) -> str:
    rows = []
    for r in records:
        row = {"class_id": r.class_id, "count": r.count, "mean": r.mean.tolist(), "cov": r.cov.tolist()}
        if isinstance(r, ClassStats):
            row["client_id"] = r.client_id
        rows.append(row)
    return json.dumps(rows, sort_keys=True, indent=1)
