"""Command-line entry point: ``ltce {simulate,run,table,plot}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .dataset import write_csv
from .dgp import simulate
from .harness import ConfigError, emit_plot, emit_table, load_config, load_covariates, run_experiment


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat TOML file of key = value settings")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable)")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    dgp = cfg.dgp_config(cfg.sweep_values[0], seed=cfg.seed)
    sim = simulate(dgp, X=load_covariates(cfg.covariates))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(sim.data, out / "dataset.csv")
    gt = sim.truth
    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y0", "y1", "tau_x"])
        for y0, y1, tx in zip(gt.Y_pot[:, 0], gt.Y_pot[:, 1], gt.tau_x):
            w.writerow([repr(float(y0)), repr(float(y1)), repr(float(tx))])
    (out / "manifest.json").write_text(sim.manifest_json())
    print(f"wrote {sim.data.n} units x {sim.data.T} stages to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    path = run_experiment(cfg, args.out, jobs=args.jobs, dump_nuisance=args.dump_nuisance,
                          dump_model=args.dump_model)
    with open(path) as fh:
        n = sum(1 for _ in fh)
    print(f"wrote {n} records to {path}")
    return 0


def cmd_table(args) -> int:
    mean_csv, std_csv = emit_table(args.inp, args.out)
    print(f"wrote {mean_csv} and {std_csv}")
    return 0


def cmd_plot(args) -> int:
    path = emit_plot(args.inp, args.axis, args.out, metric=args.metric)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltce", description="Long-term causal effect benchmark harness.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw one synthetic panel and its ground truth")
    _add_config_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run a Monte Carlo experiment")
    _add_config_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--dump-nuisance", action="store_true", help="write per-trial propensity/selection scores")
    p.add_argument("--dump-model", action="store_true", help="write trained balancing-network parameters")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("table", help="tabulate trial means and standard deviations")
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("plot", help="plot a metric along the sweep axis as SVG")
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--axis", required=True, choices=["gamma", "C", "lambda", "T"])
    p.add_argument("--metric", default="eps_cate", choices=["eps_cate", "eps_ate"])
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"ltce: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
