"""Command line entry point: ``ddsolve run`` and ``ddsolve verify``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .bench import ConfigError, run_experiment


def _run(args) -> int:
    try:
        records = run_experiment(args.config, args.out, threads=args.threads, seed=args.seed,
                                 timing=not args.no_timing)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for rec in records:
        s = rec.summary()
        if rec.error is not None:
            print(f"{rec.method:<12} FAILED: {rec.error}")
            continue
        print(f"{rec.method:<12} iters={s['iters']:<4} converged={s['converged']!s:<5} "
              f"err={s['final_volume_error']:.3e} solves={rec.solves} bytes={rec.basis_bytes}")
    print(f"wrote {len(records)} CSV file(s) and summary.json to {args.out}")
    return 0


def _verify(args) -> int:
    from .verify import run_checks

    checks = run_checks()
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name}  ({c.detail})")
    failed = sum(not c.ok for c in checks)
    if args.json:
        print(json.dumps([c.__dict__ for c in checks], default=bool))
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddsolve", description="Restricted additive Schwarz solvers and benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the methods listed in a JSON config")
    run.add_argument("config", help="path to the experiment config (JSON)")
    run.add_argument("--out", required=True, help="output directory for CSV files and summary.json")
    run.add_argument("--threads", type=int, default=1, help="worker threads for subdomain solves (default 1)")
    run.add_argument("--seed", type=int, default=0, help="seed for random initial data (default 0)")
    run.add_argument("--no-timing", action="store_true", help="write zero wall-clock times for reproducible files")
    run.set_defaults(func=_run)

    ver = sub.add_parser("verify", help="run the invariant suite on small instances")
    ver.add_argument("--json", action="store_true", help="also print the results as JSON")
    ver.set_defaults(func=_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
