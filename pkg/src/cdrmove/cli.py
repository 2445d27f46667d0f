"""Command-line entry point: run pipeline stages from a JSON config.

Exit codes: 0 success, 2 configuration error, 3 dependency or stale-artifact
error.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .config import ConfigError, default_config_json, load_config
from .pipeline import STAGES, DependencyError, Runner


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdrmove",
        description=(
            "Call-record mobility pipeline: mover detection, strong ties, "
            "call-series clustering, and post-move prediction."
        ),
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    run = sub.add_parser("run", help="run one pipeline stage (or 'all')")
    run.add_argument("stage", choices=list(STAGES) + ["all"], help="stage to run")
    run.add_argument("--config", help="JSON run configuration", default=None)
    run.add_argument("--out", help="output directory (overrides config)", default=None)
    run.add_argument("--seed", type=int, help="seed override", default=None)
    run.add_argument(
        "--threads",
        type=int,
        default=1,
        help=(
            "cap on intra-stage parallelism; stages are data-parallel by "
            "derived seeds, so the cap never changes results"
        ),
    )

    sub.add_parser("default-config", help="print the default JSON configuration")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0
    if args.command == "default-config":
        print(default_config_json())
        return 0

    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    try:
        config = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    runner = Runner(config, out_dir=config["output_dir"], threads=args.threads)
    try:
        executed = runner.run(args.stage)
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    if executed:
        print(f"ran: {', '.join(executed)}")
    else:
        print(f"cache hit: stage {args.stage} is up to date")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
