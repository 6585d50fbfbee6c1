"""Command line entry point.

    llcdro run --config exp.json [--seeds N] [--out DIR] [--parallel]
    llcdro sweep --config exp.json --param k=10,20,50 --param tau=60,70,80,90
    llcdro emit-plots RUN_DIR
    llcdro gen-data --config exp.json --out train.csv [--seed S] [--split train]

Set ``LLCDRO_LOG`` to DEBUG, INFO, WARNING (default) or ERROR for log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import datagen as dg
from . import experiment as ex

log = logging.getLogger("llcdro")


def _setup_logging() -> None:
    level = os.environ.get("LLCDRO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load(path: str, seeds: int | None = None) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(path)
    if seeds is not None:
        cfg.n_seeds = seeds
        cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seeds)
    out = Path(args.out or cfg.output_dir)
    reports, failures = ex.run_experiment(cfg, out, parallel=args.parallel)
    for f in failures:
        print(f"FAILED {f}", file=sys.stderr)
    for row in ex.summarize(reports):
        print(f"{row['method']:16s} avg {row['best_avg_acc_mean']:.4f} "
              f"worst {row['best_worst_group_acc_mean']:.4f}  ({row['n_seeds']} seeds)")
    print(f"wrote {out}")
    return 1 if failures else 0


def cmd_sweep(args) -> int:
    cfg = _load(args.config, args.seeds)
    params = [ex.parse_param(p) for p in args.param]
    out = Path(args.out or cfg.output_dir)
    _, failures = ex.run_sweep(cfg, params, out, parallel=args.parallel)
    for f in failures:
        print(f"FAILED {f}", file=sys.stderr)
    print(f"wrote {out / 'sweep_grid.csv'}")
    return 1 if failures else 0


def cmd_emit_plots(args) -> int:
    for p in ex.emit_plot_data(args.run_dir):
        print(f"wrote {p}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load(args.config)
    if "csv" in cfg.dataset:
        raise ex.ConfigError("gen-data needs a generated dataset, not a csv one")
    splits = ex.build_splits(cfg.dataset, args.seed)
    ds = getattr(splits, args.split)
    sc = ex.scenario_for(cfg.dataset, args.seed)
    dg.save_csv(ds, args.out, {"scenario": sc.to_dict(), "seed": args.seed, "split": args.split})
    print(f"wrote {args.out} ({len(ds)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="llcdro", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every method on every seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, help="override n_seeds")
    p.add_argument("--out", help="override output_dir")
    p.add_argument("--parallel", action="store_true", help="run seeds in separate processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over train settings")
    p.add_argument("--config", required=True)
    p.add_argument("--param", action="append", required=True, metavar="NAME=V1,V2")
    p.add_argument("--seeds", type=int)
    p.add_argument("--out")
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("emit-plots", help="write tidy plot CSVs for a finished run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_emit_plots)

    p = sub.add_parser("gen-data", help="write one split of the configured dataset as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "valid", "test"), default="train")
    p.set_defaults(func=cmd_gen_data)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ex.ConfigError, dg.SpecError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
