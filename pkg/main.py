"""
Main CLI tool for the FracSmith workbench
Runs registered experiments from JSON configs and lists the catalog
"""

import argparse
import json
import os
import sys
from typing import List, Optional

from loguru import logger

from config import Config, load_experiment_config
from errors import ArgumentError
from harness import EXIT_PASS, EXIT_USAGE, list_experiments, run
from schemas import ExperimentKind


def setup_logging(level: str = Config.LOG_LEVEL, log_dir: str = Config.LOG_DIR):
    """Setup logging configuration; the debug flag forces DEBUG on both sinks"""
    if Config.DEBUG:
        level = "DEBUG"

    # Create logs directory if it doesn't exist
    os.makedirs(log_dir, exist_ok=True)

    # Configure loguru
    logger.remove()  # Remove default handler
    logger.add(
        os.path.join(log_dir, "fracsmith.log"),
        rotation="1 day",
        retention="7 days",
        level=level,
        format="{time:YYYY-MM-DD HH:mm:ss} | {level} | {name} | {message}"
    )
    logger.add(
        sys.stderr,
        level=level,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan> | {message}"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="workbench",
        description="FracSmith: directional fractional calculus, operator powers and series solvers",
    )
    parser.add_argument("kind", choices=[k.value for k in ExperimentKind] + ["list"],
                        help="Experiment kind, or 'list' for the catalog")
    parser.add_argument("--config", help="Path to the JSON experiment config")
    parser.add_argument("--out", help="Directory for result.csv, report.json and manifest.json")
    parser.add_argument("--seed", type=int, help="Unsigned 64-bit seed overriding the config")
    parser.add_argument("--json", action="store_true", help="Print the catalog as JSON")
    parser.add_argument("--log-level", default=Config.LOG_LEVEL, help="Log level of both sinks")
    return parser


def display_catalog(as_json: bool = False):
    """Print every registered experiment with the identity it checks"""
    entries = list_experiments()
    if as_json:
        print(json.dumps([entry.model_dump(mode="json") for entry in entries], indent=2))
        return
    print("\n" + "=" * 72)
    print("FRACSMITH EXPERIMENTS")
    print("=" * 72)
    for entry in entries:
        print(f"{entry.kind.value}/{entry.name}")
        print(f"   Operation: {entry.operation}")
        print(f"   Anchor: {entry.anchor}")
        if entry.description:
            print(f"   {entry.description}")
    print("=" * 72)


def main(argv: Optional[List[str]] = None) -> int:
    """Main function to run one FracSmith experiment"""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level.upper())

    if args.kind == "list":
        display_catalog(args.json)
        return EXIT_PASS

    if not args.config:
        logger.error("--config is required to run an experiment")
        return EXIT_USAGE

    try:
        config = load_experiment_config(args.config)
    except ArgumentError as e:
        logger.error(str(e))
        return EXIT_USAGE

    if config.kind.value != args.kind:
        logger.error(f"Config describes a {config.kind.value} experiment, not {args.kind}")
        return EXIT_USAGE

    logger.info(f"Starting {config.kind.value}/{config.name}")
    return run(config, out_dir=args.out, seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
