"""
pruneflow - desk-scale pruning and gradient-flow toolkit
Entry point for the application.

Usage:
    python main.py train --config compare_blobs_mlp.json --seed 0
    python main.py flowcheck --config flowcheck_quadratic.json
    python main.py compare --config compare_blobs_mlp.json --set compare.rounds=[1]
    python main.py analyze --run runs/train-0123456789ab --experiment ebt
"""
import argparse
import json
import logging
import os
import sys
from typing import Optional

import config
from handlers import CONFIG_FILE, EXPERIMENTS, cmd_analyze, cmd_compare, cmd_flowcheck, cmd_train
from utils import ConfigError, PruneFlowError, ScheduleError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pruneflow", description="Pruning measures and gradient-flow checks")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("train", "prune-and-train one model per seed"),
        ("flowcheck", "integrate gradient flow and check the norm identities"),
        ("compare", "final accuracy per measure x rounds x seed"),
        ("analyze", "correlation and layer-wise studies"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", help="experiment config JSON")
        sub.add_argument("--seed", type=int, help="run a single seed instead of config.seeds")
        sub.add_argument("--out", default=None, help="output directory (default: $PRUNEFLOW_OUT or runs)")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config field by dotted path (repeatable)")
        sub.add_argument("--verbose", action="store_true", help="debug logging")
        if name == "compare":
            sub.add_argument("--workers", type=int, default=None, help="worker threads (default: $PRUNEFLOW_WORKERS)")
        if name == "analyze":
            sub.add_argument("--run", dest="runs", action="append", default=[], metavar="DIR",
                             help="run directory whose config is analyzed (repeatable)")
            sub.add_argument("--experiment", dest="experiments", action="append", choices=EXPERIMENTS,
                             help="experiment id (repeatable, default: config.analysis.experiments)")
    return parser


def configure_logging(verbose: bool):
    level = logging.DEBUG if verbose else getattr(logging, config.LOG_LEVEL, logging.INFO)
    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        level=level,
    )


def _load_run_config(run_dir: str, overrides: list, seed: Optional[int]) -> dict:
    path = os.path.join(run_dir, CONFIG_FILE)
    if not os.path.exists(path):
        raise ConfigError(f"{run_dir} is not a run directory (no {CONFIG_FILE})")
    with open(path, "r", encoding="utf-8") as f:
        return config.resolve(json.load(f), overrides, seed)


def run_command(args: argparse.Namespace) -> list:
    """Dispatch one subcommand; returns the run directories it produced."""
    out_dir = args.out or config.OUT_DIR

    if args.command == "analyze" and args.runs:
        runs = []
        for run_dir in args.runs:
            cfg = _load_run_config(run_dir, args.overrides, args.seed)
            runs.append(cmd_analyze(cfg, out_dir, args.experiments, run_dir))
        return runs

    if not args.config:
        raise ConfigError("--config is required")
    cfg = config.load_config(args.config, args.overrides, args.seed)

    if args.command == "train":
        return [cmd_train(cfg, out_dir)]
    if args.command == "flowcheck":
        return [cmd_flowcheck(cfg, out_dir)]
    if args.command == "compare":
        run, table = cmd_compare(cfg, out_dir, args.workers or config.WORKERS)
        print(table)
        return [run]
    return [cmd_analyze(cfg, out_dir, args.experiments)]


def main(argv: Optional[list] = None) -> int:
    """Run the CLI and return the exit status."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    logger.info(f"Starting pruneflow {args.command}...")

    try:
        runs = run_command(args)
    except (ConfigError, ScheduleError) as e:
        logger.error(f"Invalid configuration: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PruneFlowError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED

    status = EXIT_OK
    for run in runs:
        if not run.close():
            status = EXIT_FAILED
        failed = run.failed_checks()
        if failed:
            logger.error(f"{len(failed)} hard check(s) failed in {run.path}: {', '.join(failed)}")
            status = EXIT_FAILED
        print(run.path)
    return status


if __name__ == "__main__":
    sys.exit(main())
