"""Command-line entry point: ``lungref {simulate,fit,diagnose,zscore,compare}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
from scipy import linalg

from .distributions import DomainError
from .gamlss import DegenerateDataError
from .io import SchemaError
from .pipeline import ConfigError, RunConfig, cmd_compare, cmd_diagnose, cmd_fit, cmd_simulate, cmd_zscore, resolve

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lungref", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="seed (overrides config seed)")

    p = sub.add_parser("simulate", help="draw a synthetic dataset from a builtin truth scenario")
    common(p)
    p.add_argument("--scenario")
    p.add_argument("-n", type=int, dest="n")

    p = sub.add_parser("fit", help="fit GAMLSS and SLR models per response and sex")
    common(p)
    p.add_argument("--input", help="subject CSV (overrides config input)")

    p = sub.add_parser("diagnose", help="write report.json and figure CSVs")
    common(p)
    p.add_argument("--input", help="subject CSV (overrides config input)")
    p.add_argument("--models", help="directory with model files (default: <out>/models)")
    p.add_argument("--svg", action="store_true", help="also render static SVG figures")

    p = sub.add_parser("zscore", help="score measurements against a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="CSV with age_years,height_cm[,weight_kg],value")
    p.add_argument("--levels", type=float, nargs="+", default=[0.05, 0.025])

    p = sub.add_parser("compare", help="compare two report.json files")
    p.add_argument("report_a")
    p.add_argument("report_b")
    return parser


def _run(args) -> int:
    if args.command == "zscore":
        table = cmd_zscore(args.model, args.input, args.levels)
        table.to_csv(sys.stdout, index=False, lineterminator="\n")
        return EXIT_OK
    if args.command == "compare":
        print(json.dumps(cmd_compare(args.report_a, args.report_b), indent=2, sort_keys=True))
        return EXIT_OK

    cfg = resolve(RunConfig.load(args.config), out=args.out, seed=args.seed, input=getattr(args, "input", None))
    if args.command == "simulate":
        if args.scenario:
            cfg = RunConfig.from_dict({**cfg.to_dict(), "scenario": args.scenario})
        if args.n:
            cfg = RunConfig.from_dict({**cfg.to_dict(), "n_simulate": args.n})
        print(cmd_simulate(cfg))
    elif args.command == "fit":
        cmd_fit(cfg)
    elif args.command == "diagnose":
        cmd_diagnose(cfg, args.models, svg=args.svg)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (SchemaError, ConfigError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DegenerateDataError, DomainError, linalg.LinAlgError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
