"""Instruments for looking inside federated models.

* linear CKA between per-layer representations of different client models
  on a shared probe set;
* per-class classifier weight norms, the classic symptom of label skew;
* sliced-Wasserstein separability of the per-class feature Gaussians, a
  cheap forecast of how much classifier calibration can help.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ccvr import GlobalClassStats, sample_virtual
from .errors import ArgumentError, DegenerateInputError
from .neuralcore import ModelParams, layer_activations

QUANTILE_GRID = 512
DEFAULT_PROJECTIONS = 128


@dataclass
class CkaReport:
    layer: int
    name: str
    matrix: np.ndarray

    @property
    def mean_offdiag(self) -> float:
        k = self.matrix.shape[0]
        mask = ~np.eye(k, dtype=bool)
        return float(self.matrix[mask].mean())

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "name": self.name,
            "matrix": self.matrix.tolist(),
            "mean_offdiag": self.mean_offdiag,
        }


@dataclass
class SeparabilityReport:
    class_ids: list[int]
    matrix: np.ndarray

    @property
    def mean_distance(self) -> float:
        c = self.matrix.shape[0]
        return float(self.matrix[~np.eye(c, dtype=bool)].mean())

    def to_dict(self) -> dict:
        return {"class_ids": self.class_ids, "matrix": self.matrix.tolist(), "mean_distance": self.mean_distance}


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear CKA of two representations of the same N inputs.

    Columns are centred, then ``||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise ArgumentError("representations must be 2-D")
    if X.shape[0] != Y.shape[0]:
        raise ArgumentError("representations must share the sample axis")
    if X.shape[0] < 2:
        raise ArgumentError("need at least two samples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        raise DegenerateInputError("representation has zero variance")
    return float(np.linalg.norm(X.T @ Y) ** 2 / (xx * yy))


def layer_names(m: ModelParams) -> list[str]:
    return [f"layer_{i + 1}" for i in range(len(m.weights))] + ["classifier"]


def cka_across_clients(
    models: Sequence[ModelParams], probe: np.ndarray, layers: Sequence[int] | None = None
) -> list[CkaReport]:
    """Pairwise CKA matrices, one per requested layer (default: every layer).

    Layer indices count extractor layers from 0; the last index is the
    classifier output.
    """
    if len(models) < 2:
        raise ArgumentError("need ≥ 2 models for cross-client CKA")
    shapes = [[t.shape for t in m.tensors()] for m in models]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ArgumentError("models do not share an architecture")
    acts = [layer_activations(m, probe) for m in models]
    names = layer_names(models[0])
    wanted = range(len(names)) if layers is None else layers
    k = len(models)
    reports = []
    for layer in wanted:
        if not 0 <= layer < len(names):
            raise ArgumentError(f"layer index {layer} out of range")
        mat = np.eye(k)
        for i in range(k):
            for j in range(i + 1, k):
                mat[i, j] = mat[j, i] = linear_cka(acts[i][layer], acts[j][layer])
        reports.append(CkaReport(layer, names[layer], mat))
    return reports


def classifier_norms(m: ModelParams) -> np.ndarray:
    """L2 norm of each classifier weight row (bias excluded)."""
    return np.linalg.norm(m.classifier_weight, axis=1)


def _unit_directions(dim: int, projections: int, seed: int) -> np.ndarray:
    dirs = np.random.default_rng(seed).standard_normal((projections, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _quantiles(sorted_proj: np.ndarray, grid: int) -> np.ndarray:
    n = sorted_proj.shape[0]
    q = (np.arange(grid) + 0.5) / grid
    idx = np.ceil(q * n).astype(np.int64) - 1
    return sorted_proj[idx]


def sliced_wasserstein(
    A: np.ndarray, B: np.ndarray, projections: int = DEFAULT_PROJECTIONS, seed: int = 0
) -> float:
    """Mean over random unit directions of the 1-D 2-Wasserstein distance.

    Equal-size sets are matched sorted-to-sorted; otherwise both empirical
    quantile functions are read off a common grid of ``QUANTILE_GRID``
    midpoints.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ArgumentError("sample sets must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ArgumentError("sample sets differ in dimension")
    if projections < 1:
        raise ArgumentError("projections must be >= 1")
    dirs = _unit_directions(A.shape[1], projections, seed)
    pa = np.sort(A @ dirs.T, axis=0)
    pb = np.sort(B @ dirs.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        pa = _quantiles(pa, QUANTILE_GRID)
        pb = _quantiles(pb, QUANTILE_GRID)
    per_slice = np.sqrt(np.mean((pa - pb) ** 2, axis=0))
    return float(per_slice.mean())


def separability_report(
    source: Sequence[GlobalClassStats] | Mapping[int, np.ndarray],
    *,
    projections: int = DEFAULT_PROJECTIONS,
    samples_per_class: int = 500,
    seed: int = 0,
) -> SeparabilityReport:
    """Pairwise sliced-Wasserstein distances between class-conditional samples.

    ``source`` is either per-class feature samples keyed by class id, or
    merged Gaussian statistics from which ``samples_per_class`` draws are
    made.  The mean off-diagonal distance is the separability score.
    """
    if isinstance(source, Mapping):
        samples = {int(c): np.asarray(v, dtype=np.float64) for c, v in source.items()}
    else:
        samples = {g.class_id: sample_virtual(g, samples_per_class, seed) for g in source}
    ids = sorted(samples)
    if len(ids) < 2:
        raise ArgumentError("need at least two classes")
    c = len(ids)
    mat = np.zeros((c, c))
    for i in range(c):
        for j in range(i + 1, c):
            mat[i, j] = mat[j, i] = sliced_wasserstein(samples[ids[i]], samples[ids[j]], projections, seed)
    return SeparabilityReport(ids, mat)


def write_json(path: str | Path, payload: dict | list) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def write_matrix_csv(path: str | Path, matrix: np.ndarray, labels: Sequence[int | str]) -> None:
    """Long form ``row,col,value`` for plotting tools."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for i, a in enumerate(labels):
            for j, b in enumerate(labels):
                w.writerow([a, b, repr(float(matrix[i, j]))])
