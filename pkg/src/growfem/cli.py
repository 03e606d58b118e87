"""Command line entry point: ``growfem simulate | parse-cli | bench-verification``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _simulate(args):
    from .pipeline import NumericalFailure, report, run

    cfg = load_config(args.config)
    if args.parts is not None:
        cfg.set("partition.parts", args.parts)
    if args.vtk_every is not None:
        cfg.set("output.vtk_every", args.vtk_every)
    out = Path(args.out) if args.out else cfg.resolve(cfg["output"]["directory"])
    cfg.validate()
    try:
        result = run(cfg, out_dir=out)
    except (NumericalFailure, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    summary = report(result, out)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _parse_cli(args):
    from .laser_path import CLIParseError, read_cli

    try:
        path = read_cli(args.file)
    except (CLIParseError, OSError, UnicodeDecodeError) as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(path.stats(), indent=2))
    return EXIT_OK


def _bench(args):
    from .benchmark import BenchmarkParams, QuadratureError, convergence_study

    def progress(r, dofs, dt, err):
        print(f"# round {r}: dofs={dofs} dt={dt:g} error={err:.6g}", file=sys.stderr, flush=True)

    try:
        res = convergence_study(BenchmarkParams(), rounds=args.refinements,
                                base_level=args.base_level, fine_level=args.fine_level,
                                progress=progress)
    except (QuadratureError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    text = res.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    print(f"slope {res.rate:.4f}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="growfem", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a printing simulation")
    s.add_argument("--config", required=True)
    s.add_argument("--parts", type=int)
    s.add_argument("--vtk-every", type=int)
    s.add_argument("--out")
    s.set_defaults(func=_simulate)

    p = sub.add_parser("parse-cli", help="validate a CLI slice file and print statistics")
    p.add_argument("file")
    p.set_defaults(func=_parse_cli)

    b = sub.add_parser("bench-verification", help="run the moving-source convergence study")
    b.add_argument("--refinements", type=int, default=3)
    b.add_argument("--base-level", type=int, default=2)
    b.add_argument("--fine-level", type=int, default=5)
    b.add_argument("--out")
    b.set_defaults(func=_bench)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
