"""Reproducible experiment pipelines behind the ``ccvrsim`` subcommands.

Every command reads an :class:`ExperimentConfig`, writes its artifacts under
``cfg.out`` and records them in ``manifest_<command>.json``.  Outputs depend
only on the config and seeds, never on wall-clock time.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import plotting
from .ccvr import (
    RetrainConfig,
    calibrate_oracle,
    collect_uploads,
    merge_uploads,
    run_ccvr_pipeline,
    stats_to_json,
    write_stats,
)
from .config import ExperimentConfig
from .datakit import (
    Dataset,
    Partition,
    label_histogram,
    load_csv,
    load_dataset,
    make_blob_splits,
    partition_dirichlet,
    partition_iid,
    split_validation,
)
from .diagnostics import (
    classifier_norms,
    cka_across_clients,
    separability_report,
    write_json,
    write_matrix_csv,
)
from .errors import ArgumentError, CcvrError
from .fedsim import evaluate, run_federated, write_records_csv
from .neuralcore import ModelParams, forward_features, load_model, save_model

logger = logging.getLogger(__name__)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict[str, int]
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(
            {
                "command": self.command,
                "config_hash": self.config_hash,
                "seeds": self.seeds,
                "artifacts": sorted(self.artifacts),
                "version": self.version,
            },
            sort_keys=True,
            indent=1,
        )


def manifest_path(out: str | Path, command: str) -> Path:
    return Path(out) / f"manifest_{command}.json"


def verify_manifest(path: str | Path) -> list[Path]:
    """Raise ``FileNotFoundError`` naming every listed artifact that is missing."""
    path = Path(path)
    payload = json.loads(path.read_text())
    paths = [path.parent / a for a in payload["artifacts"]]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"manifest {path} lists missing artifacts: {missing}")
    return paths


class _Writer:
    """Collects artifact paths relative to the output directory."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, cfg.hash(), cfg.seeds())

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.manifest.artifacts.append(rel)
        return p

    def finish(self) -> RunManifest:
        manifest_path(self.root, self.manifest.command).write_text(self.manifest.to_json())
        return self.manifest


# -- inputs -------------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training set and evaluation set (validation split when configured)."""
    spec = cfg.dataset
    if spec.kind == "blobs":
        train, test = make_blob_splits(
            spec.class_count, spec.per_class, spec.test_per_class, spec.input_dim, spec.cluster_spread, spec.seed
        )
    else:
        train, test = (_load_file(p) for p in (spec.path, spec.test_path))
        if train.class_count != test.class_count:
            c = max(train.class_count, test.class_count)
            train, test = Dataset(train.features, train.labels, c), Dataset(test.features, test.labels, c)
    if spec.validation_fraction > 0:
        train, test = split_validation(train, spec.validation_fraction, spec.seed)
    return train, test


def _load_file(path: str) -> Dataset:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return load_csv(path) if path.endswith(".csv") else load_dataset(path)


def make_partition(cfg: ExperimentConfig, train: Dataset) -> Partition:
    p = cfg.partition
    if p.iid:
        return partition_iid(train, p.clients, p.seed)
    return partition_dirichlet(train, p.clients, p.alpha, p.seed)


def read_partition(path: str | Path, train: Dataset) -> Partition:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"partition file not found: {path} (run 'partition' first)")
    part = Partition.from_json(path.read_text())
    part.validate(len(train))
    return part


def read_model(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_model(path)


def _accuracy_row(stage: str, acc: float, per_class: np.ndarray) -> list[str]:
    return [stage, f"{100 * acc:.2f}"] + [f"{100 * a:.2f}" for a in per_class]


# -- commands -----------------------------------------------------------------


def cmd_partition(cfg: ExperimentConfig) -> RunManifest:
    w = _Writer(cfg, "partition")
    train, _ = load_data(cfg)
    part = make_partition(cfg, train)
    w.path("partition.json").write_text(part.to_json())
    hist = label_histogram(train, part)
    with open(w.path("label_histogram.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["client"] + [f"class_{c}" for c in range(train.class_count)])
        for k, row in enumerate(hist):
            out.writerow([k] + row.tolist())
    plotting.label_histogram_figure(hist, w.path("label_histogram.png"))
    return w.finish()


def cmd_train(cfg: ExperimentConfig, partition: str | Path | None = None) -> RunManifest:
    w = _Writer(cfg, "train")
    train, test = load_data(cfg)
    part = read_partition(partition or w.root / "partition.json", train)
    result = run_federated(
        train, part, cfg.federated, test, snapshot_rounds=cfg.snapshot_rounds, workers=cfg.workers
    )
    save_model(w.path("model.json"), result.model)
    write_records_csv(w.path("metrics.csv"), result.records, train.class_count)
    plotting.accuracy_curve_figure(
        [r.round for r in result.records], [r.accuracy for r in result.records], w.path("accuracy.png")
    )
    for t, clients in sorted(result.snapshots.items()):
        for k, m in sorted(clients.items()):
            save_model(w.path(f"snapshots/round_{t}/client_{k}.json"), m)
    return w.finish()


def _retrain_cfg(cfg: ExperimentConfig, epochs: int | None = None, seed: int | None = None) -> RetrainConfig:
    c = cfg.ccvr
    return RetrainConfig(
        epochs=c.epochs if epochs is None else epochs,
        batch_size=c.batch_size,
        learning_rate=c.learning_rate,
        momentum=c.momentum,
        weight_decay=c.weight_decay,
        seed=c.seed if seed is None else seed,
    )


def calibrate_model(
    cfg: ExperimentConfig, model: ModelParams, train: Dataset, part: Partition, seed: int | None = None
):
    """CCVR (or oracle, per config) calibration; returns ``(model, ccvr_result | None)``."""
    c = cfg.ccvr
    seed = c.seed if seed is None else seed
    if c.oracle_whole or c.oracle_per_class_cap is not None:
        z = forward_features(model, train.features)
        calibrated = calibrate_oracle(
            model,
            z,
            train.labels,
            _retrain_cfg(cfg, c.oracle_epochs, seed),
            transform=c.transform,
            per_class_cap=None if c.oracle_whole else c.oracle_per_class_cap,
            seed=seed,
        )
        return calibrated, None
    mode, count = c.count_mode
    result = run_ccvr_pipeline(
        model,
        train,
        part,
        transform=c.transform,
        count_mode=mode,
        count=count,
        retrain=_retrain_cfg(cfg, seed=seed),
        seed=seed,
        transform_before_stats=c.transform_before_stats,
    )
    return result.model, result


def cmd_calibrate(
    cfg: ExperimentConfig, checkpoint: str | Path | None = None, partition: str | Path | None = None
) -> RunManifest:
    w = _Writer(cfg, "calibrate")
    train, test = load_data(cfg)
    part = read_partition(partition or w.root / "partition.json", train)
    model = read_model(checkpoint or w.root / "model.json")
    before, before_pc = evaluate(model, test)
    calibrated, result = calibrate_model(cfg, model, train, part)
    after, after_pc = evaluate(calibrated, test)

    sub = "calibrate"
    if result is not None:
        write_stats(w.path(f"{sub}/uploads.bin"), result.uploads, model.feature_dim)
        write_stats(w.path(f"{sub}/global_stats.bin"), result.global_stats, model.feature_dim)
        w.path(f"{sub}/global_stats.json").write_text(stats_to_json(result.global_stats))
    save_model(w.path(f"{sub}/calibrated.json"), calibrated)
    with open(w.path(f"{sub}/calibration.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["stage", "accuracy"] + [f"acc_class_{c}" for c in range(test.class_count)])
        out.writerow(_accuracy_row("before", before, before_pc))
        out.writerow(_accuracy_row("after", after, after_pc))
    write_json(
        w.path(f"{sub}/calibration.json"),
        {
            "before": {"accuracy": before, "class_accuracy": before_pc.tolist()},
            "after": {"accuracy": after, "class_accuracy": after_pc.tolist()},
        },
    )
    plotting.calibration_figure(before_pc, after_pc, w.path(f"{sub}/calibration.png"))
    logger.info("accuracy before %.4f after %.4f", before, after)
    return w.finish()


def _snapshot_models(snapshot_dir: Path) -> dict[int, dict[int, ModelParams]]:
    if not snapshot_dir.is_dir():
        raise FileNotFoundError(f"snapshot directory not found: {snapshot_dir}")
    rounds: dict[int, dict[int, ModelParams]] = {}
    for rdir in sorted(snapshot_dir.glob("round_*")):
        t = int(rdir.name.split("_")[1])
        rounds[t] = {int(p.stem.split("_")[1]): load_model(p) for p in sorted(rdir.glob("client_*.json"))}
    if not rounds:
        raise FileNotFoundError(f"no round_* snapshots under {snapshot_dir}")
    return rounds


def cmd_diagnose(
    cfg: ExperimentConfig,
    snapshots: str | Path | None = None,
    models: Sequence[str | Path] | None = None,
    checkpoint: str | Path | None = None,
    partition: str | Path | None = None,
) -> RunManifest:
    """CKA and classifier-norm reports over client models, separability of the global model.

    Client models come from ``models`` (explicit checkpoints, treated as one
    group "round 0") or from a snapshot tree.
    """
    w = _Writer(cfg, "diagnose")
    train, test = load_data(cfg)
    if models:
        missing = [str(p) for p in models if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"missing model checkpoints: {missing}")
        groups = {0: {i: load_model(p) for i, p in enumerate(models)}}
    else:
        groups = _snapshot_models(Path(snapshots) if snapshots else w.root / "snapshots")

    probe = test.features
    if cfg.diagnostics.probe_size is not None:
        probe = probe[: cfg.diagnostics.probe_size]

    sub = "diagnose"
    if cfg.diagnostics.cka:
        for t, clients in sorted(groups.items()):
            if len(clients) < 2:
                raise ArgumentError(f"need ≥ 2 models for CKA (round {t} has {len(clients)})")
            ordered = [clients[k] for k in sorted(clients)]
            reports = cka_across_clients(ordered, probe)
            for r in reports:
                write_json(w.path(f"{sub}/cka_round{t}_layer{r.layer}.json"), {**r.to_dict(), "round": t, "clients": sorted(clients)})
                write_matrix_csv(w.path(f"{sub}/cka_round{t}_layer{r.layer}.csv"), r.matrix, sorted(clients))
            plotting.cka_layers_figure(
                [r.name for r in reports], [r.mean_offdiag for r in reports], w.path(f"{sub}/cka_round{t}.png"), f"round {t}"
            )

    norm_rows, labels = [], []
    with open(w.path(f"{sub}/classifier_norms.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        class_count = next(iter(next(iter(groups.values())).values())).class_count
        out.writerow(["round", "client"] + [f"norm_class_{c}" for c in range(class_count)])
        for t, clients in sorted(groups.items()):
            for k in sorted(clients):
                norms = classifier_norms(clients[k])
                out.writerow([t, k] + [f"{v:.6f}" for v in norms])
                norm_rows.append(norms)
                labels.append(f"r{t} c{k}")
    plotting.classifier_norms_figure(np.array(norm_rows), labels, w.path(f"{sub}/classifier_norms.png"))

    if cfg.diagnostics.separability:
        ckpt = Path(checkpoint) if checkpoint else w.root / "model.json"
        model = read_model(ckpt)
        part = read_partition(partition or w.root / "partition.json", train)
        stats = merge_uploads(
            collect_uploads(model, train, part, cfg.ccvr.transform, cfg.ccvr.transform_before_stats), train.class_count
        )
        rep = separability_report(
            stats,
            projections=cfg.diagnostics.projections,
            samples_per_class=cfg.diagnostics.separability_samples,
            seed=cfg.ccvr.seed,
        )
        write_json(w.path(f"{sub}/separability.json"), rep.to_dict())
        write_matrix_csv(w.path(f"{sub}/separability.csv"), rep.matrix, rep.class_ids)
        plotting.matrix_figure(rep.matrix, rep.class_ids, w.path(f"{sub}/separability.png"), "sliced Wasserstein")
    return w.finish()


@dataclass
class SweepRow:
    value: int
    accuracies: list[float]
    error: str | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else float("nan")


def _sweep_point(
    cfg: ExperimentConfig, value: int, model: ModelParams, train: Dataset, test: Dataset, part: Partition
) -> SweepRow:
    point = replace(cfg, ccvr=replace(cfg.ccvr, virtual_per_class=int(value), virtual_total=None))
    accs: list[float] = []
    try:
        for r in range(cfg.sweep.repeats):
            calibrated, _ = calibrate_model(point, model, train, part, seed=cfg.ccvr.seed + r)
            accs.append(evaluate(calibrated, test)[0])
    except CcvrError as exc:
        logger.warning("sweep point %s failed: %s", value, exc)
        return SweepRow(int(value), accs, str(exc))
    return SweepRow(int(value), accs)


def run_sweep(
    cfg: ExperimentConfig, model: ModelParams, train: Dataset, test: Dataset, part: Partition
) -> list[SweepRow]:
    """Calibrate one trained model for every virtual-sample count in the sweep.

    Repeat ``r`` uses seed ``ccvr.seed + r``.  A failing point is recorded and
    the sweep moves on.  With ``workers > 1`` points run concurrently; rows
    come back in axis order either way.
    """
    values = [int(v) for v in cfg.sweep.values]
    if any(v < 0 for v in values):
        raise ArgumentError(f"sweep values must be nonnegative, got {values}")
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(lambda v: _sweep_point(cfg, v, model, train, test, part), values))
    return [_sweep_point(cfg, v, model, train, test, part) for v in values]


def cmd_sweep(
    cfg: ExperimentConfig, checkpoint: str | Path | None = None, partition: str | Path | None = None
) -> RunManifest:
    w = _Writer(cfg, "sweep")
    train, test = load_data(cfg)
    part = read_partition(partition or w.root / "partition.json", train)
    model = read_model(checkpoint or w.root / "model.json")
    rows = run_sweep(cfg, model, train, test, part)
    with open(w.path("sweep/sweep.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["mc", "accuracy_mean", "accuracy_std", "repeats", "status"])
        for r in rows:
            out.writerow(
                [r.value, f"{100 * r.mean:.2f}", f"{100 * r.std:.2f}", len(r.accuracies), "ok" if r.error is None else f"error: {r.error}"]
            )
    for r in rows:
        write_json(
            w.path(f"sweep/mc_{r.value}/point.json"),
            {"mc": r.value, "accuracies": r.accuracies, "error": r.error},
        )
    ok = [r for r in rows if r.accuracies]
    plotting.sweep_figure([r.value for r in ok], [r.mean for r in ok], [r.std for r in ok], w.path("sweep/sweep.png"))
    return w.finish()
