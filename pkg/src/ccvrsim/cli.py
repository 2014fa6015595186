"""``ccvrsim`` command line: partition | train | calibrate | diagnose | sweep.

Flags override values from ``--config``.  Exit codes: 0 success, 2 bad
config or arguments, 3 numeric failure, 4 IO failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import Sequence

from . import __version__, experiment
from .config import ExperimentConfig, load_config
from .errors import ArgumentError, ConfigError, NumericError

logger = logging.getLogger("ccvrsim")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 already; keep the message format ours
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"ccvrsim: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="one seed for dataset, partition, training and calibration")
    common.add_argument("--alpha", type=float, help="Dirichlet concentration")
    common.add_argument("--rounds", type=int)
    common.add_argument("--algorithm", choices=("fedavg", "fedprox", "fedavgm"))
    common.add_argument("--head", choices=("plain", "clsnorm"))
    common.add_argument("--cls-prox-mu", type=float)
    mc = common.add_mutually_exclusive_group()
    mc.add_argument("--mc", type=int, help="virtual features per class")
    mc.add_argument("--mc-proportional", type=int, metavar="N_TOTAL", help="total virtual features, split by class size")
    common.add_argument("--tukey", type=float, help="Tukey power exponent in (0, 1]")
    oracle = common.add_mutually_exclusive_group()
    oracle.add_argument("--oracle-whole", action="store_true", help="retrain on all real features instead of CCVR")
    oracle.add_argument("--oracle-per-class-cap", type=int, metavar="N")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ccvrsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ccvrsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("partition", parents=[common], help="split the training set across clients")
    p = sub.add_parser("train", parents=[common], help="run federated training")
    p.add_argument("--partition", help="partition JSON (default OUT/partition.json)")
    p.add_argument("--snapshot-rounds", type=_int_list, help="comma-separated rounds whose client models are saved")
    p = sub.add_parser("calibrate", parents=[common], help="calibrate a trained checkpoint")
    p.add_argument("--checkpoint", help="model JSON (default OUT/model.json)")
    p.add_argument("--partition")
    p = sub.add_parser("diagnose", parents=[common], help="representation diagnostics over client models")
    p.add_argument("--snapshots", help="snapshot directory (default OUT/snapshots)")
    p.add_argument("--models", nargs="+", help="explicit client checkpoints instead of snapshots")
    p.add_argument("--checkpoint", help="global model for the separability report")
    p.add_argument("--partition")
    p = sub.add_parser("sweep", parents=[common], help="sweep virtual features per class")
    p.add_argument("--checkpoint")
    p.add_argument("--partition")
    p.add_argument("--values", type=_int_list, help="comma-separated M_c values")
    p.add_argument("--repeats", type=int)
    return parser


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    fed, part, ccvr, sweep = cfg.federated, cfg.partition, cfg.ccvr, cfg.sweep
    if args.alpha is not None:
        part = replace(part, alpha=args.alpha, iid=False)
    if args.rounds is not None:
        fed = replace(fed, rounds=args.rounds)
    if args.algorithm is not None:
        fed = replace(fed, algorithm=args.algorithm)
    if args.head is not None:
        fed = replace(fed, head="weight_normalized" if args.head == "clsnorm" else "plain")
    if args.cls_prox_mu is not None:
        fed = replace(fed, cls_prox_mu=args.cls_prox_mu)
    if args.mc is not None:
        ccvr = replace(ccvr, virtual_per_class=args.mc, virtual_total=None)
    if args.mc_proportional is not None:
        ccvr = replace(ccvr, virtual_total=args.mc_proportional)
    if args.tukey is not None:
        ccvr = replace(ccvr, tukey=args.tukey)
    if args.oracle_whole:
        ccvr = replace(ccvr, oracle_whole=True, oracle_per_class_cap=None)
    if args.oracle_per_class_cap is not None:
        ccvr = replace(ccvr, oracle_whole=False, oracle_per_class_cap=args.oracle_per_class_cap)
    if getattr(args, "values", None) is not None:
        sweep = replace(sweep, values=args.values)
    if getattr(args, "repeats", None) is not None:
        sweep = replace(sweep, repeats=args.repeats)
    cfg = replace(cfg, federated=fed, partition=part, ccvr=ccvr, sweep=sweep)
    if getattr(args, "snapshot_rounds", None) is not None:
        cfg = replace(cfg, snapshot_rounds=args.snapshot_rounds)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _dispatch(cfg: ExperimentConfig, args: argparse.Namespace) -> experiment.RunManifest:
    cmd = args.command
    if cmd == "partition":
        return experiment.cmd_partition(cfg)
    if cmd == "train":
        return experiment.cmd_train(cfg, args.partition)
    if cmd == "calibrate":
        return experiment.cmd_calibrate(cfg, args.checkpoint, args.partition)
    if cmd == "diagnose":
        return experiment.cmd_diagnose(cfg, args.snapshots, args.models, args.checkpoint, args.partition)
    return experiment.cmd_sweep(cfg, args.checkpoint, args.partition)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        manifest = _dispatch(cfg, args)
    except (ConfigError, ArgumentError) as exc:
        print(f"ccvrsim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"ccvrsim: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"ccvrsim: io failure: {exc}", file=sys.stderr)
        return EXIT_IO
    print(experiment.manifest_path(cfg.out, manifest.command))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
