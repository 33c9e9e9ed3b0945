"""Command line entry point: ``caprec {prepare,train,sweep,baseline,eval,synth}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import experiment
from .experiment import ConfigError, ExperimentConfig

_log = logging.getLogger("caprec")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for f in fields(ExperimentConfig):
        if f.name in ("threads", "reference_mode"):
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE",
                       help=f"override config key '{f.name}'")
    p.add_argument("--threads", type=int, default=None, help="worker processes for sweep cells")
    p.add_argument("--reference-mode", action="store_true",
                   help="single-threaded BLAS and serial cells, for byte-reproducible output")
    p.add_argument("-v", "--verbose", action="store_true")


def _build_config(args) -> ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if args.reference_mode:
        overrides["reference_mode"] = "true"
    if args.config:
        return experiment.load_config(args.config, overrides)
    return experiment.parse_config_text("", overrides)


def _cmd_synth(args) -> int:
    from .synthetic import planted_implicit, synthetic_coordinates, write_checkins

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = planted_implicit(args.users, args.items, args.planted_rank, args.density, seed=args.seed)
    coords = synthetic_coordinates(args.items, seed=args.seed)
    write_checkins(data, out / "checkins.tsv", coords, out / "pois.tsv")
    (out / "experiment.cfg").write_text(
        "# synthetic check-in demo\n"
        "dataset = synthetic\n"
        "data = checkins.tsv\n"
        "format = checkin-tsv\n"
        "pois = pois.tsv\n"
        "min_ratings = 0\n"
        f"rank = {args.planted_rank}\n"
        "models = pmf\n"
        "variants = constrained,unconstrained,onlycap,postprocess\n"
        "repetitions = 1\n"
        f"output = {out / 'run'}\n",
        encoding="utf-8",
    )
    print(out / "experiment.cfg")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caprec", description="Capacity-constrained recommenders")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, filter, split and derive capacities/propensities")
    _add_config_flags(p)
    p = sub.add_parser("sweep", help="train and evaluate every configured cell into metrics.csv")
    _add_config_flags(p)
    p = sub.add_parser("train", help="train a single cell")
    _add_config_flags(p)
    p.add_argument("--model", default="pmf", choices=sorted(experiment.MODEL_FAMILIES))
    p.add_argument("--variant", default="constrained", choices=experiment.VARIANTS)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("baseline", help="post-process unconstrained checkpoints to respect capacities")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="checkpoint to use instead of the sweep's unconstrained ones")
    p = sub.add_parser("eval", help="evaluate a checkpoint on a seed's test split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", default="pmf", choices=sorted(experiment.MODEL_FAMILIES))
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("synth", help="write a synthetic check-in dataset and a demo config")
    p.add_argument("--out", default="synthetic")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--planted-rank", type=int, default=5)
    p.add_argument("--density", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        cfg = _build_config(args)
        if args.command == "prepare":
            print(experiment.cmd_prepare(cfg))
        elif args.command == "sweep":
            print(experiment.cmd_sweep(cfg))
        elif args.command == "train":
            row = experiment.cmd_train(cfg, args.model, args.variant, args.alpha, args.seed)
            for k, v in row.items():
                print(f"{k}\t{v}")
        elif args.command == "baseline":
            print(experiment.cmd_baseline(cfg, args.checkpoint))
        elif args.command == "eval":
            report = experiment.cmd_eval(cfg, args.checkpoint, args.seed, args.alpha, args.model)
            for k, v in report.as_row(cfg.tops).items():
                print(f"{k}\t{v!r}")
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"caprec: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
