"""Command-line entry point: ``twophase-ura <kind> --config FILE [--seed N] [--out PATH]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiments import KINDS, ConfigError, load_config, run

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twophase-ura",
        description="Replica predictions and Monte Carlo sweeps for the two-phase URA scheme.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="kind", required=True, metavar="KIND")
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=None, help="CSV output path (default: stdout)")
        p.add_argument("--threads", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; 2 is reserved for partial failures here
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    try:
        spec = load_config(args.config, kind=args.kind, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    result = run(spec, threads=args.threads)
    if spec.out:
        Path(spec.out).write_text(result.csv, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(result.csv)
    if result.failures:
        print(f"warning: {result.failures} trial(s) failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
