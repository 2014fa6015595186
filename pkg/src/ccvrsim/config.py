"""Experiment configuration: nested YAML mirroring the usual hyperparameter table.

Example::

    out: runs/blobs
    dataset: {kind: blobs, class_count: 10, per_class: 500, cluster_spread: 0.3}
    partition: {clients: 10, alpha: 0.05}
    federated: {communication_rounds: 30, local_epoch: 5, learning_rate: 0.05}
    ccvr: {number_of_virtual_features_per_class: 2000, epoch: 10}

Unknown keys are rejected.  Every section is optional.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .fedsim import FedConfig
from .transform import TransformCfg


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    class_count: int = 10
    per_class: int = 500
    test_per_class: int = 200
    input_dim: int = 16
    cluster_spread: float = 0.3
    seed: int = 0
    path: str | None = None
    test_path: str | None = None
    validation_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("blobs", "file"):
            raise ConfigError("dataset.kind must be 'blobs' or 'file'")
        if self.kind == "file" and (self.path is None or self.test_path is None):
            raise ConfigError("file datasets need both path and test_path")
        if self.kind == "blobs" and self.path is not None:
            raise ConfigError("give either synthetic parameters or a file path, not both")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class PartitionSpec:
    clients: int = 10
    alpha: float = 0.5
    iid: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clients < 1:
            raise ConfigError("partition.clients must be >= 1")
        if not self.iid and not self.alpha > 0:
            raise ConfigError("partition.alpha must be > 0")


@dataclass(frozen=True)
class CcvrSpec:
    relu: bool = True
    tukey: float = 0.5
    transform_before_stats: bool = True
    virtual_per_class: int = 100
    virtual_total: int | None = None
    epochs: int = 10
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    seed: int = 0
    oracle_whole: bool = False
    oracle_per_class_cap: int | None = None
    oracle_epochs: int = 50

    def __post_init__(self) -> None:
        if self.virtual_per_class < 0 or (self.virtual_total is not None and self.virtual_total < 0):
            raise ConfigError("virtual sample counts must be nonnegative")
        if not 0 < self.tukey <= 1:
            raise ConfigError("ccvr.tukey must lie in (0, 1]")

    @property
    def transform(self) -> TransformCfg:
        return TransformCfg(self.relu, self.tukey)

    @property
    def count_mode(self) -> tuple[str, int]:
        if self.virtual_total is not None:
            return "proportional", self.virtual_total
        return "fixed", self.virtual_per_class


@dataclass(frozen=True)
class DiagnosticsSpec:
    cka: bool = True
    separability: bool = True
    projections: int = 128
    separability_samples: int = 500
    probe_size: int | None = None


@dataclass(frozen=True)
class SweepSpec:
    values: tuple[int, ...] = (0, 50, 100, 500, 1000, 2000)
    repeats: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = DatasetSpec()
    partition: PartitionSpec = PartitionSpec()
    federated: FedConfig = FedConfig()
    snapshot_rounds: tuple[int, ...] = ()
    ccvr: CcvrSpec = CcvrSpec()
    diagnostics: DiagnosticsSpec = DiagnosticsSpec()
    sweep: SweepSpec = SweepSpec()
    out: str = "runs/default"
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of everything that affects results (not ``out`` or ``workers``)."""
        body = {k: v for k, v in self.to_dict().items() if k not in ("out", "workers")}
        canon = json.dumps(body, sort_keys=True, default=list)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def seeds(self) -> dict[str, int]:
        return {
            "dataset": self.dataset.seed,
            "partition": self.partition.seed,
            "federated": self.federated.seed,
            "ccvr": self.ccvr.seed,
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            dataset=replace(self.dataset, seed=seed),
            partition=replace(self.partition, seed=seed),
            federated=replace(self.federated, seed=seed),
            ccvr=replace(self.ccvr, seed=seed),
        )


# YAML key -> dataclass field, where the names differ
_FED_ALIASES = {
    "communication_rounds": "rounds",
    "local_epoch": "local_epochs",
    "mu": "prox_mu",
    "clsprox_mu": "cls_prox_mu",
}
_CCVR_ALIASES = {
    "number_of_virtual_features_per_class": "virtual_per_class",
    "epoch": "epochs",
}
_HEAD_ALIASES = {"clsnorm": "weight_normalized"}


def _build(cls, raw: Any, section: str, aliases: dict[str, str] | None = None):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    aliases = aliases or {}
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = aliases.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    if cls is FedConfig and "head" in kwargs:
        kwargs["head"] = _HEAD_ALIASES.get(kwargs["head"], kwargs["head"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {"dataset", "partition", "federated", "ccvr", "diagnostics", "sweep", "out", "workers"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    fed_raw = dict(raw.get("federated") or {})
    snapshots = tuple(fed_raw.pop("snapshot_rounds", ()) or ())
    return ExperimentConfig(
        dataset=_build(DatasetSpec, raw.get("dataset"), "dataset"),
        partition=_build(PartitionSpec, raw.get("partition"), "partition"),
        federated=_build(FedConfig, fed_raw, "federated", _FED_ALIASES),
        snapshot_rounds=snapshots,
        ccvr=_build(CcvrSpec, raw.get("ccvr"), "ccvr", _CCVR_ALIASES),
        diagnostics=_build(DiagnosticsSpec, raw.get("diagnostics"), "diagnostics"),
        sweep=_build(SweepSpec, raw.get("sweep"), "sweep"),
        out=str(raw.get("out", "runs/default")),
        workers=int(raw.get("workers", 1)),
    )


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)
