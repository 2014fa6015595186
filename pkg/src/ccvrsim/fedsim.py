"""Round-based federated training: FedAvg, FedProx, FedAvgM, clsnorm, clsprox.

Each round the server broadcasts the global parameters, every selected
client trains a private copy on its shard, and the server replaces the
global model with the size-weighted average of the returned parameters
(optionally smoothed by server momentum).  Client RNG streams are keyed by
``(seed, round, client)`` and the reduction runs in client-id order, so the
outcome does not depend on how client work is scheduled.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datakit import Dataset, Partition
from .errors import ArgumentError, ConfigError, NumericError
from .neuralcore import (
    HEADS,
    LossConfig,
    ModelParams,
    OptimizerState,
    init_model,
    loss_and_grads,
    predict,
    sgd_step,
)

logger = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "fedavgm")


@dataclass(frozen=True)
class FedConfig:
    """Federated training hyperparameters.

    ``prox_mu`` is only active for ``fedprox`` and ``server_momentum`` only
    for ``fedavgm``; ``cls_prox_mu`` (clsprox) and ``head`` combine with any
    algorithm.
    """

    rounds: int = 100
    clients_per_round: int | None = None
    local_epochs: int = 10
    batch_size: int = 64
    algorithm: str = "fedavg"
    head: str = "plain"
    cls_prox_mu: float = 0.0
    prox_mu: float = 0.01
    server_momentum: float = 0.1
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    hidden: tuple[int, ...] = (64, 32)
    feature_dim: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds and local_epochs must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.prox_mu < 0 or self.cls_prox_mu < 0:
            raise ConfigError("proximal coefficients must be nonnegative")
        if not 0 <= self.server_momentum < 1:
            raise ConfigError("server_momentum must lie in [0, 1)")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1")

    @property
    def active_prox_mu(self) -> float:
        return self.prox_mu if self.algorithm == "fedprox" else 0.0

    @property
    def active_server_momentum(self) -> float:
        return self.server_momentum if self.algorithm == "fedavgm" else 0.0

    def loss_config(self, anchor: ModelParams) -> LossConfig:
        needs_anchor = self.active_prox_mu > 0 or self.cls_prox_mu > 0
        return LossConfig(self.head, self.active_prox_mu, self.cls_prox_mu, anchor if needs_anchor else None)


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    class_accuracy: np.ndarray
    class_norms: np.ndarray
    selected: list[int]
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class FederatedResult:
    model: ModelParams
    records: list[RoundRecord]
    snapshots: dict[int, dict[int, ModelParams]] = field(default_factory=dict)


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, client_id])


def local_train(
    global_params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    cfg: FedConfig,
    rng: np.random.Generator,
    *,
    context: str = "",
) -> ModelParams:
    """Run ``cfg.local_epochs`` of shuffled minibatch SGD from ``global_params``.

    Momentum buffers start from zero; the proximal anchor is the received
    global model.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ArgumentError("client has no data")
    if cfg.local_epochs == 0 or cfg.learning_rate == 0:
        return global_params
    loss_cfg = cfg.loss_config(global_params)
    opt = OptimizerState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    m = global_params
    n = len(y)
    for epoch in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            try:
                _, grads = loss_and_grads(m, x[sel], y[sel], loss_cfg)
            except NumericError as exc:
                raise NumericError(f"{context} epoch {epoch}: {exc}".strip()) from exc
            m = sgd_step(m, grads, opt)
    return m


def aggregate(
    params_list: Sequence[ModelParams], sizes: Sequence[int], client_ids: Sequence[int] | None = None
) -> ModelParams:
    """Size-weighted coordinate-wise average, ``p_k = n_k / sum(n)``.

    When ``client_ids`` is given the sum runs in ascending id order, making
    the result bit-identical under any permutation of the inputs.
    """
    if not params_list:
        raise ArgumentError("nothing to aggregate")
    if len(params_list) != len(sizes):
        raise ArgumentError("one size per parameter set is required")
    if client_ids is not None:
        order = sorted(range(len(params_list)), key=lambda i: client_ids[i])
        params_list = [params_list[i] for i in order]
        sizes = [sizes[i] for i in order]
    sizes_arr = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes_arr <= 0):
        raise ArgumentError("client sizes must be positive")
    ref = params_list[0].tensors()
    for p in params_list[1:]:
        t = p.tensors()
        if len(t) != len(ref) or any(a.shape != b.shape for a, b in zip(t, ref)):
            raise ArgumentError("parameter shapes differ between clients")
    weights = sizes_arr / sizes_arr.sum()
    # ref + sum p_k (t_k - ref): the same average, but exact when all inputs agree
    out = [t.copy() for t in ref]
    for w, p in zip(weights[1:], params_list[1:]):
        for acc, r, t in zip(out, ref, p.tensors()):
            acc += w * (t - r)
    return params_list[0].with_tensors(out)


@dataclass
class ServerState:
    velocity: list[np.ndarray] | None = None


def server_update(prev_global: ModelParams, aggregated: ModelParams, state: ServerState, beta: float) -> ModelParams:
    """Server momentum on the pseudo-gradient ``prev - aggregated``.

    ``v <- beta * v + delta; new = prev - v``.  With ``beta == 0`` the
    aggregated model is returned as is.
    """
    if beta == 0:
        return aggregated
    prev = prev_global.tensors()
    agg = aggregated.tensors()
    if len(prev) != len(agg) or any(a.shape != b.shape for a, b in zip(prev, agg)):
        raise ArgumentError("parameter shapes differ")
    if state.velocity is None:
        state.velocity = [np.zeros_like(t) for t in prev]
    new = []
    for i, (p, a) in enumerate(zip(prev, agg)):
        state.velocity[i] = beta * state.velocity[i] + (p - a)
        new.append(p - state.velocity[i])
    return prev_global.with_tensors(new)


def evaluate(m: ModelParams, test: Dataset) -> tuple[float, np.ndarray]:
    """Top-1 accuracy and per-class accuracy vector."""
    counts = test.class_counts()
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ArgumentError(f"test set has no samples for classes {missing}")
    correct = predict(m, test.features) == test.labels
    per_class = np.bincount(test.labels, weights=correct, minlength=test.class_count) / counts
    return float(correct.mean()), per_class


def select_clients(client_count: int, per_round: int | None, seed: int, round_index: int) -> list[int]:
    if per_round is None or per_round >= client_count:
        return list(range(client_count))
    rng = np.random.default_rng([seed, round_index])
    return sorted(int(k) for k in rng.choice(client_count, size=per_round, replace=False))


def run_federated(
    train: Dataset,
    part: Partition,
    cfg: FedConfig,
    test: Dataset,
    *,
    init: ModelParams | None = None,
    snapshot_rounds: Iterable[int] = (),
    workers: int = 1,
) -> FederatedResult:
    """Train for ``cfg.rounds`` rounds, evaluating the global model after each.

    Args:
        train: Training set the partition indexes into.
        part: Client assignment.
        cfg: Hyperparameters.
        test: Held-out evaluation set (every class present).
        init: Starting model; a seeded fresh network by default.
        snapshot_rounds: Rounds (1-based) whose local client models are kept.
        workers: Clients trained concurrently within a round.
    """
    part.validate(len(train))
    per_round = cfg.clients_per_round
    if per_round is not None and per_round > part.client_count:
        raise ConfigError("clients_per_round exceeds the number of clients")
    model = init if init is not None else init_model(
        train.input_dim, train.class_count, cfg.hidden, cfg.feature_dim, cfg.head, cfg.seed
    )
    if model.head != cfg.head:
        model = replace(model, head=cfg.head)
    keep = set(snapshot_rounds)
    records: list[RoundRecord] = []
    snapshots: dict[int, dict[int, ModelParams]] = {}
    server = ServerState()
    beta = cfg.active_server_momentum
    shards = [(train.features[idx], train.labels[idx]) for idx in part.assignments]

    def work(t: int, k: int) -> ModelParams:
        x, y = shards[k]
        return local_train(model, x, y, cfg, client_rng(cfg.seed, t, k), context=f"round {t} client {k}")

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            start = time.perf_counter()
            selected = select_clients(part.client_count, per_round, cfg.seed, t)
            if pool is None:
                local = [work(t, k) for k in selected]
            else:
                local = list(pool.map(lambda k: work(t, k), selected))
            if t in keep:
                snapshots[t] = {k: p.copy() for k, p in zip(selected, local)}
            aggregated = aggregate(local, [len(part.assignments[k]) for k in selected], selected)
            model = server_update(model, aggregated, server, beta)
            acc, per_class = evaluate(model, test)
            norms = np.linalg.norm(model.classifier_weight, axis=1)
            records.append(RoundRecord(t, acc, per_class, norms, selected, time.perf_counter() - start))
            logger.info("round %d accuracy %.4f", t, acc)
    finally:
        if pool is not None:
            pool.shutdown()
    return FederatedResult(model, records, snapshots)


def record_columns(class_count: int) -> list[str]:
    return (
        ["round", "accuracy"]
        + [f"acc_class_{c}" for c in range(class_count)]
        + [f"norm_class_{c}" for c in range(class_count)]
    )


def write_records_csv(path: str | Path, records: Sequence[RoundRecord], class_count: int) -> None:
    """Accuracies in percent to two decimals; norms to six."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(record_columns(class_count))
        for r in records:
            w.writerow(
                [r.round, f"{100 * r.accuracy:.2f}"]
                + [f"{100 * a:.2f}" for a in r.class_accuracy]
                + [f"{v:.6f}" for v in r.class_norms]
            )
