"""
Command-line front end.

    python main.py run experiment.ini --set ensemble.beta_ema=0.9
    python main.py plot results/*.csv --axis samples --out curves.svg
    python main.py compare async.csv sync.csv
    python main.py calibrate pendulum
    python main.py serve
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from dotenv import load_dotenv

from .config import parse_config
from .envs import ENVIRONMENTS, make_env
from .errors import ConfigError
from .evaluation import calibrate_threshold
from .harness import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUN_FAILURE, comparison_csv_text, comparison_table, \
    compare_summary, run_experiment
from .metrics import RunMetrics
from .plotting import emit_plot

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = "results"


def configure_logging() -> None:
    level = os.environ.get("ASYNCDYNA_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def thread_cap() -> Optional[int]:
    value = os.environ.get("ASYNCDYNA_THREADS")
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"expected a positive integer, got '{value}'", key="ASYNCDYNA_THREADS") from None
    if threads < 1:
        raise ConfigError(f"expected a positive integer, got '{value}'", key="ASYNCDYNA_THREADS")
    return threads


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asyncdyna", description="Asynchronous model-based RL experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run an experiment config")
    run.add_argument("config", type=Path)
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                     help="override a config key (repeatable)")
    run.add_argument("--out", type=Path, default=None, help="output directory (default $ASYNCDYNA_OUTPUT_DIR)")

    plot = commands.add_parser("plot", help="plot learning curves from run CSVs")
    plot.add_argument("csvs", nargs="+", type=Path)
    plot.add_argument("--axis", choices=("wall_clock", "samples"), default="samples")
    plot.add_argument("--out", type=Path, required=True)

    compare = commands.add_parser("compare", help="compare run CSVs against reference run CSVs")
    compare.add_argument("csv_a", type=Path)
    compare.add_argument("csv_b", type=Path, help="reference run (usually sync)")
    compare.add_argument("--out", type=Path, default=None, help="also write the table as CSV")

    calibrate = commands.add_parser("calibrate", help="solved threshold from the scripted controller")
    calibrate.add_argument("env", choices=sorted(ENVIRONMENTS))
    calibrate.add_argument("--episodes", type=int, default=5)
    calibrate.add_argument("--seed", type=int, default=0)

    commands.add_parser("serve", help="serve experiment tools over MCP (stdio)")
    return parser


def _run(args) -> int:
    try:
        config = parse_config(args.config.read_text(), args.overrides)
        threads = thread_cap()
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG_ERROR
    output_dir = args.out or Path(os.environ.get("ASYNCDYNA_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))
    result = run_experiment(config, output_dir, threads)
    for path in result.files:
        print(path)
    if result.comparison:
        print(comparison_table(result.comparison))
    if not result.runs:
        return EXIT_RUN_FAILURE
    return result.exit_code


def _plot(args) -> int:
    args.out.write_text(emit_plot(args.csvs, args.axis))
    print(args.out)
    return EXIT_OK


def _compare(args) -> int:
    rows = compare_summary([RunMetrics.read_csv(args.csv_a)], [RunMetrics.read_csv(args.csv_b)])
    print(comparison_table(rows))
    if args.out:
        args.out.write_text(comparison_csv_text(rows))
    return EXIT_OK


def _calibrate(args) -> int:
    threshold = calibrate_threshold(make_env(args.env), args.episodes, args.seed)
    print(repr(threshold))
    return EXIT_OK


def _serve(args) -> int:
    from mbrl_server import mcp

    mcp.run(transport="stdio")
    return EXIT_OK


HANDLERS = {"run": _run, "plot": _plot, "compare": _compare, "calibrate": _calibrate, "serve": _serve}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except (OSError, ValueError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
