"""Command-line entry point: ``fedmom run|sweep|validate|resume``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .errors import ConfigError
from .harness import EXIT_CONFIG, EXIT_OK, cmd_resume, cmd_run, cmd_sweep
from .validate import SCOPES, format_table, run_checks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmom", description="Federated momentum optimization simulator")
    parser.add_argument("--version", action="version", version=f"fedmom {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log errors")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one configuration")
    run.add_argument("config", help="path to an INI run configuration")

    sweep = sub.add_parser("sweep", help="run one configuration per value of a swept key")
    sweep.add_argument("config")
    sweep.add_argument("--axis", required=True, help="beta, eta, rounds, cohort, sigma or hetero")
    sweep.add_argument("--values", required=True, help="comma-separated values, e.g. 1.0,0.5,0.2")

    val = sub.add_parser("validate", help="run the invariant suites")
    val.add_argument("scope", nargs="?", default="all", choices=("all",) + SCOPES)

    res = sub.add_parser("resume", help="continue a run from a checkpoint")
    res.add_argument("checkpoint")
    res.add_argument("--rounds", type=int, default=None, help="total rounds to reach (default: the run's own)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "sweep":
            values = [v for v in args.values.split(",") if v.strip()]
            return cmd_sweep(args.config, args.axis, values)
        if args.command == "resume":
            return cmd_resume(args.checkpoint, args.rounds)
        results = run_checks(args.scope)
        print(format_table(results))
        return EXIT_OK if all(r.ok for r in results) else 1
    except ConfigError as exc:
        # raised only before any run starts, e.g. a malformed FEDMOM_THREADS
        logging.getLogger("fedmom").error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
