"""Command line: ``tradi run``, ``tradi verify``, ``tradi curves``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, DataFormatError, NumericError

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
CURVE_CHOICES = ("avc", "calib", "prec")


def _run(args):
    from .runner import run_experiment

    report = run_experiment(args.config, out_dir=args.out, workers=args.workers, seed=args.seed)
    for r in report.rows:
        print(f"{r['method']:>14}  {r['metric']:<10} {r['mean']:.4f} ± {r['std']:.4f}")
    for k, v in report.checks.items():
        print(f"{'check':>14}  {k:<10} {v}")
    return 0


def _verify(args):
    from .verify import verify_suite

    results = verify_suite(fault_gradient=args.fault_inject)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds:6.1f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def _curves(args):
    from .runner import emit_curves

    paths = emit_curves(args.dumps, [args.kind], args.out, args.bins, args.thresholds, args.binning)
    for p in paths:
        print(p)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tradi", description="Weight-distribution tracking experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("config")
    run.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--seed", type=int, default=None)
    run.set_defaults(func=_run)

    ver = sub.add_parser("verify", help="run the oracle battery")
    ver.add_argument("--fault-inject", action="store_true", help="corrupt analytic gradients (negative control)")
    ver.set_defaults(func=_verify)

    cur = sub.add_parser("curves", help="curve CSVs from classification dumps")
    cur.add_argument("dumps", nargs="+")
    cur.add_argument("--kind", choices=CURVE_CHOICES, required=True)
    cur.add_argument("--out", default=None)
    cur.add_argument("--bins", type=int, default=10)
    cur.add_argument("--thresholds", type=int, default=21)
    cur.add_argument("--binning", choices=("width", "count"), default="width")
    cur.set_defaults(func=_curves)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
