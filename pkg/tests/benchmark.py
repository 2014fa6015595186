"""The label-skewed blob benchmark shared by the slow tests, cached per process."""

from __future__ import annotations

from dataclasses import replace
from functools import lru_cache

from ccvrsim.config import ExperimentConfig, config_from_dict
from ccvrsim.experiment import calibrate_model, load_data, make_partition
from ccvrsim.fedsim import FederatedResult, evaluate, run_federated

BENCH = {
    "dataset": {"class_count": 10, "per_class": 500, "test_per_class": 200, "input_dim": 16, "cluster_spread": 0.3},
    "partition": {"clients": 10, "alpha": 0.05},
    "federated": {"communication_rounds": 30, "local_epoch": 5, "batch_size": 64, "learning_rate": 0.05},
    "ccvr": {"number_of_virtual_features_per_class": 2000, "epoch": 10, "learning_rate": 0.001},
}
FINAL_ROUND = 30


def bench_config(seed: int = 0, *, iid: bool = False, spread: float = 0.3) -> ExperimentConfig:
    cfg = config_from_dict(BENCH).with_seed(seed)
    return replace(
        cfg,
        dataset=replace(cfg.dataset, cluster_spread=spread),
        partition=replace(cfg.partition, iid=iid),
        snapshot_rounds=(FINAL_ROUND,),
    )


@lru_cache(maxsize=None)
def trained(seed: int = 0, iid: bool = False, spread: float = 0.3):
    """(cfg, train, test, partition, FederatedResult) for one benchmark run."""
    cfg = bench_config(seed, iid=iid, spread=spread)
    train, test = load_data(cfg)
    part = make_partition(cfg, train)
    result: FederatedResult = run_federated(train, part, cfg.federated, test, snapshot_rounds=cfg.snapshot_rounds)
    return cfg, train, test, part, result


@lru_cache(maxsize=None)
def accuracies(seed: int = 0, spread: float = 0.3) -> dict[str, float]:
    """Test accuracy before calibration and after each calibration mode."""
    cfg, train, test, part, result = trained(seed, False, spread)
    model = result.model
    ccvr_model, _ = calibrate_model(cfg, model, train, part)
    oracle_cfg = replace(cfg, ccvr=replace(cfg.ccvr, oracle_whole=True))
    oracle_model, _ = calibrate_model(oracle_cfg, model, train, part)
    return {
        "base": evaluate(model, test)[0],
        "ccvr": evaluate(ccvr_model, test)[0],
        "oracle": evaluate(oracle_model, test)[0],
    }

