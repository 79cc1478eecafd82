"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 comparison
inputs that do not match.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness.config import OUTPUT_ROOT_ENV, ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_MISMATCH = 0, 1, 2, 3


def _cmd_run(args) -> int:
    from .harness.plotting import MetricsError, emit_plots
    from .harness.runner import run_experiment

    config = load_config(args.config)
    results = run_experiment(config, seed_offset=args.seed_offset, workers=args.workers)
    for res in results:
        print(f"{res.run_dir}: {sum(s.status == 'ok' for s in res.seeds)}/{len(res.seeds)} seeds ok")
        if not args.no_plots:
            try:
                for path in emit_plots(res.run_dir, fmt=args.format):
                    print(f"  wrote {path}")
            except MetricsError as exc:
                print(f"  no plots: {exc}", file=sys.stderr)
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


def _cmd_validate(args) -> int:
    config = load_config(args.config)
    print(f"{args.config}: ok ({config.env}, {config.method}, {len(config.seeds)} seeds)")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .harness.plotting import MetricsError, emit_plots

    try:
        paths = emit_plots(args.dir, out_dir=args.out, fmt=args.format)
    except MetricsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .harness.report import ComparisonError, compare_methods, read_summary

    try:
        table = compare_methods([read_summary(p) for p in args.summaries])
    except ComparisonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    text = table.format()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    from .harness.oracle import TOLERANCE, run_oracle_suite

    report = run_oracle_suite(cases=args.cases, seed=args.seed)
    status = "PASS" if report.passed else "FAIL"
    print(
        f"{status}: {report.cases} random matrix games, max |error| = {report.max_error:.3g} "
        f"(tolerance {TOLERANCE:g}), out-of-range intentions = {report.out_of_range}"
    )
    return EXIT_OK if report.passed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kindmarl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every seed of a config")
    p.add_argument("config")
    p.add_argument("--seed-offset", type=int, default=0, help="shift every seed by this amount")
    p.add_argument("--workers", type=int, default=None, help="parallel seed workers (overrides config)")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--format", default="svg", choices=["svg", "pdf"])
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("plot", help="render reward curves from a metrics directory")
    p.add_argument("dir")
    p.add_argument("--out", default=None)
    p.add_argument("--format", default="svg", choices=["svg", "pdf"])
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("compare", help="tabulate tail rewards and percentage differences")
    p.add_argument("summaries", nargs="+", help="summary.csv files or run directories")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("oracle", help="check intentions against the matrix-game oracle")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_oracle)

    parser.epilog = f"Set {OUTPUT_ROOT_ENV} to override the output root of every run."
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
