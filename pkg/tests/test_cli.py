import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from ccvrsim import experiment
from ccvrsim.ccvr import read_stats
from ccvrsim.cli import main
from ccvrsim.config import load_config
from ccvrsim.datakit import Partition, make_blob_splits, save_dataset
from ccvrsim.errors import NumericError
from ccvrsim.neuralcore import load_model

SMALL = {
    "dataset": {"class_count": 3, "per_class": 40, "test_per_class": 20, "input_dim": 4, "cluster_spread": 0.4},
    "partition": {"clients": 3, "alpha": 0.3},
    "federated": {
        "communication_rounds": 2,
        "local_epoch": 1,
        "batch_size": 16,
        "learning_rate": 0.05,
        "hidden": [8],
        "feature_dim": 4,
        "snapshot_rounds": [1, 2],
    },
    "ccvr": {"number_of_virtual_features_per_class": 50, "epoch": 2},
    "diagnostics": {"projections": 16, "separability_samples": 100},
    "sweep": {"values": [0, 50], "repeats": 2},
}


def _config(tmp_path, **overrides):
    raw = {**SMALL, **overrides}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def _run(cfg, out, *cmds, extra=()):
    for cmd in cmds:
        assert main([cmd, "--config", cfg, "--out", str(out), *extra]) == 0, cmd


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full run of every command on the small config."""
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root)
    out = root / "run"
    _run(cfg, out, "partition", "train", "calibrate", "diagnose", "sweep")
    return cfg, out


class TestPartition:
    def test_rerun_identical(self, tmp_path):
        cfg = _config(tmp_path)
        _run(cfg, tmp_path / "a", "partition")
        _run(cfg, tmp_path / "b", "partition")
        for name in ("partition.json", "label_histogram.csv", "label_histogram.png", "manifest_partition.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_histogram_columns_sum_to_class_sizes(self, pipeline):
        _, out = pipeline
        rows = _rows(out / "label_histogram.csv")
        assert len(rows) == 3
        assert [sum(int(r[f"class_{c}"]) for r in rows) for c in range(3)] == [40, 40, 40]

    def test_benchmark_skew(self, tmp_path):
        cfg = load_config(Path(__file__).parents[1] / "configs" / "blob_benchmark.yaml")
        from dataclasses import replace

        experiment.cmd_partition(replace(cfg, out=str(tmp_path)))
        rows = _rows(tmp_path / "label_histogram.csv")
        counts = np.array([[int(v) for k, v in r.items() if k != "client"] for r in rows])
        share = counts.max(axis=1) / counts.sum(axis=1)
        assert np.mean(share >= 0.5) > 0.5


class TestTrain:
    def test_one_round_one_row(self, tmp_path):
        cfg = _config(tmp_path)
        _run(cfg, tmp_path, "partition")
        _run(cfg, tmp_path, "train", extra=("--rounds", "1"))
        assert len(_rows(tmp_path / "metrics.csv")) == 1

    def test_rerun_byte_identical(self, pipeline, tmp_path):
        cfg, out = pipeline
        _run(cfg, tmp_path, "partition", "train")
        for name in ("metrics.csv", "model.json", "accuracy.png", "snapshots/round_2/client_1.json"):
            assert (out / name).read_bytes() == (tmp_path / name).read_bytes()

    def test_fedprox_zero_mu_matches_fedavg(self, pipeline, tmp_path):
        cfg, out = pipeline
        raw = yaml.safe_load(Path(cfg).read_text())
        raw["federated"].update(algorithm="fedprox", mu=0.0)
        prox = tmp_path / "prox.yaml"
        prox.write_text(yaml.safe_dump(raw))
        _run(str(prox), tmp_path, "partition", "train")
        assert (out / "metrics.csv").read_bytes() == (tmp_path / "metrics.csv").read_bytes()

    def test_missing_partition_is_io_error(self, tmp_path, capsys):
        assert main(["train", "--config", _config(tmp_path), "--out", str(tmp_path / "none")]) == 4
        assert "partition" in capsys.readouterr().err

    def test_snapshots_written(self, pipeline):
        _, out = pipeline
        assert sorted(p.name for p in (out / "snapshots").iterdir()) == ["round_1", "round_2"]


class TestCalibrate:
    def test_before_after_rows(self, pipeline):
        _, out = pipeline
        rows = _rows(out / "calibrate" / "calibration.csv")
        assert [r["stage"] for r in rows] == ["before", "after"]
        assert set(rows[0]) == {"stage", "accuracy", "acc_class_0", "acc_class_1", "acc_class_2"}
        full = json.loads((out / "calibrate" / "calibration.json").read_text())
        assert f"{100 * full['after']['accuracy']:.2f}" == rows[1]["accuracy"]

    def test_zero_virtual_samples_changes_nothing(self, pipeline, tmp_path):
        cfg, out = pipeline
        assert main(["calibrate", "--config", cfg, "--out", str(tmp_path), "--checkpoint", str(out / "model.json"),
                     "--partition", str(out / "partition.json"), "--mc", "0"]) == 0
        rows = _rows(tmp_path / "calibrate" / "calibration.csv")
        assert {k: v for k, v in rows[0].items() if k != "stage"} == {k: v for k, v in rows[1].items() if k != "stage"}
        assert (tmp_path / "calibrate" / "calibrated.json").read_text() == (out / "model.json").read_text()

    def test_stats_files_round_trip(self, pipeline, tmp_path):
        from ccvrsim.ccvr import write_stats

        _, out = pipeline
        for name in ("global_stats.bin", "uploads.bin"):
            d, recs = read_stats(out / "calibrate" / name)
            write_stats(tmp_path / name, recs, d)
            assert (tmp_path / name).read_bytes() == (out / "calibrate" / name).read_bytes()

    def test_no_per_sample_features_in_server_output(self, pipeline):
        _, out = pipeline
        d = 4
        # header + one (client, class, count, mean, cov) record per client and class, independent of N
        expected = 25 + 3 * 3 * (16 + 8 * (d + d * d))
        assert (out / "calibrate" / "uploads.bin").stat().st_size == expected
        names = {p.name for p in (out / "calibrate").iterdir()}
        assert names == {"uploads.bin", "global_stats.bin", "global_stats.json", "calibrated.json",
                         "calibration.csv", "calibration.json", "calibration.png"}

    @pytest.mark.parametrize("flag", [["--oracle-whole"], ["--oracle-per-class-cap", "10"]])
    def test_oracle_modes(self, pipeline, tmp_path, flag):
        cfg, out = pipeline
        assert main(["calibrate", "--config", cfg, "--out", str(tmp_path), "--checkpoint", str(out / "model.json"),
                     "--partition", str(out / "partition.json"), *flag]) == 0
        assert not (tmp_path / "calibrate" / "uploads.bin").exists()
        assert load_model(tmp_path / "calibrate" / "calibrated.json").transform is not None

    def test_missing_checkpoint(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        _run(cfg, tmp_path, "partition")
        assert main(["calibrate", "--config", cfg, "--out", str(tmp_path)]) == 4
        assert "model.json" in capsys.readouterr().err


class TestDiagnose:
    def test_reports(self, pipeline):
        _, out = pipeline
        rep = json.loads((out / "diagnose" / "cka_round2_layer2.json").read_text())
        assert rep["name"] == "classifier" and rep["round"] == 2 and len(rep["matrix"]) == 3
        assert (out / "diagnose" / "cka_round1.png").exists()
        sep = json.loads((out / "diagnose" / "separability.json").read_text())
        assert sep["class_ids"] == [0, 1, 2] and sep["mean_distance"] > 0

    def test_norm_rows_are_rounds_times_clients(self, pipeline):
        _, out = pipeline
        rows = _rows(out / "diagnose" / "classifier_norms.csv")
        assert len(rows) == 2 * 3
        assert [(r["round"], r["client"]) for r in rows][:4] == [("1", "0"), ("1", "1"), ("1", "2"), ("2", "0")]

    def test_single_model_rejected(self, pipeline, tmp_path, capsys):
        cfg, out = pipeline
        code = main(["diagnose", "--config", cfg, "--out", str(tmp_path), "--models", str(out / "model.json")])
        assert code == 2
        assert "need ≥ 2 models" in capsys.readouterr().err

    def test_explicit_models(self, pipeline, tmp_path):
        cfg, out = pipeline
        models = [str(out / f"snapshots/round_2/client_{k}.json") for k in range(3)]
        assert main(["diagnose", "--config", cfg, "--out", str(tmp_path), "--models", *models,
                     "--checkpoint", str(out / "model.json"), "--partition", str(out / "partition.json")]) == 0
        assert len(_rows(tmp_path / "diagnose" / "classifier_norms.csv")) == 3

    def test_missing_snapshots_listed(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        assert main(["diagnose", "--config", cfg, "--out", str(tmp_path)]) == 4
        assert "snapshots" in capsys.readouterr().err


class TestSweep:
    def test_rows_and_baseline(self, pipeline):
        _, out = pipeline
        rows = _rows(out / "sweep" / "sweep.csv")
        assert [r["mc"] for r in rows] == ["0", "50"]
        assert all(r["status"] == "ok" and r["repeats"] == "2" for r in rows)
        before = _rows(out / "calibrate" / "calibration.csv")[0]["accuracy"]
        assert rows[0]["accuracy_mean"] == before and rows[0]["accuracy_std"] == "0.00"

    def test_single_value_matches_calibrate(self, pipeline, tmp_path):
        cfg, out = pipeline
        common = ["--config", cfg, "--out", str(tmp_path), "--checkpoint", str(out / "model.json"),
                  "--partition", str(out / "partition.json")]
        assert main(["sweep", *common, "--values", "50", "--repeats", "1"]) == 0
        rows = _rows(tmp_path / "sweep" / "sweep.csv")
        assert len(rows) == 1
        assert rows[0]["accuracy_mean"] == _rows(out / "calibrate" / "calibration.csv")[1]["accuracy"]

    def test_partial_failure_recorded(self, pipeline, tmp_path, monkeypatch):
        cfg, out = pipeline
        real = experiment.calibrate_model

        def flaky(point, *a, **k):
            if point.ccvr.virtual_per_class == 50:
                raise NumericError("covariance exploded")
            return real(point, *a, **k)

        monkeypatch.setattr(experiment, "calibrate_model", flaky)
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path), "--checkpoint", str(out / "model.json"),
                     "--partition", str(out / "partition.json"), "--values", "0,50,100"]) == 0
        status = [r["status"] for r in _rows(tmp_path / "sweep" / "sweep.csv")]
        assert status == ["ok", "error: covariance exploded", "ok"]

    def test_workers_do_not_change_output(self, pipeline, tmp_path):
        cfg, out = pipeline
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path), "--checkpoint", str(out / "model.json"),
                     "--partition", str(out / "partition.json"), "--workers", "2"]) == 0
        assert (tmp_path / "sweep" / "sweep.csv").read_bytes() == (out / "sweep" / "sweep.csv").read_bytes()


class TestManifests:
    @pytest.mark.parametrize("cmd", ["partition", "train", "calibrate", "diagnose", "sweep"])
    def test_every_artifact_exists(self, pipeline, cmd):
        _, out = pipeline
        paths = experiment.verify_manifest(out / f"manifest_{cmd}.json")
        assert paths
        payload = json.loads((out / f"manifest_{cmd}.json").read_text())
        assert payload["config_hash"] and payload["version"] and set(payload["seeds"]) == {"dataset", "partition", "federated", "ccvr"}

    def test_deleting_an_artifact_fails_loudly(self, tmp_path):
        cfg = _config(tmp_path)
        _run(cfg, tmp_path, "partition")
        (tmp_path / "label_histogram.csv").unlink()
        with pytest.raises(FileNotFoundError, match="label_histogram.csv"):
            experiment.verify_manifest(tmp_path / "manifest_partition.json")

    def test_whole_pipeline_byte_identical(self, pipeline, tmp_path):
        cfg, out = pipeline
        _run(cfg, tmp_path, "partition", "train", "calibrate", "diagnose", "sweep")
        ours = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file() and p.name != "cfg.yaml")
        theirs = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())
        assert ours == theirs
        for rel in ours:
            assert (tmp_path / rel).read_bytes() == (out / rel).read_bytes(), rel


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "bad.yaml").write_text("federated:\n  bogus: 1\n")
        assert main(["partition", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_bad_flag_value(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--algorithm", "sgd"])
        assert exc.value.code == 2

    def test_numeric_failure(self, tmp_path, monkeypatch):
        def boom(cfg, *a, **k):
            raise NumericError("round 3 client 1: non-finite loss")

        monkeypatch.setattr(experiment, "cmd_train", boom)
        assert main(["train", "--config", _config(tmp_path), "--out", str(tmp_path)]) == 3

    def test_flag_overrides(self, tmp_path):
        from ccvrsim.cli import apply_overrides, build_parser

        args = build_parser().parse_args(
            ["calibrate", "--seed", "9", "--alpha", "0.1", "--rounds", "4", "--algorithm", "fedavgm", "--head", "clsnorm",
             "--cls-prox-mu", "0.2", "--mc-proportional", "500", "--tukey", "0.7", "--oracle-per-class-cap", "5"]
        )
        cfg = apply_overrides(load_config(None), args)
        assert set(cfg.seeds().values()) == {9}
        assert cfg.partition.alpha == 0.1 and cfg.federated.rounds == 4 and cfg.federated.algorithm == "fedavgm"
        assert cfg.federated.head == "weight_normalized" and cfg.federated.cls_prox_mu == 0.2
        assert cfg.ccvr.count_mode == ("proportional", 500) and cfg.ccvr.tukey == 0.7
        assert cfg.ccvr.oracle_per_class_cap == 5 and not cfg.ccvr.oracle_whole


def test_file_dataset(tmp_path):
    train, test = make_blob_splits(3, 30, 10, 4, 0.4, 0)
    save_dataset(tmp_path / "train.bin", train)
    save_dataset(tmp_path / "test.bin", test)
    raw = {**SMALL, "dataset": {"kind": "file", "path": str(tmp_path / "train.bin"), "test_path": str(tmp_path / "test.bin")}}
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    _run(str(cfg), tmp_path / "run", "partition", "train")
    part = Partition.from_json((tmp_path / "run" / "partition.json").read_text())
    part.validate(90)


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ccvrsim.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("ccvrsim ")
