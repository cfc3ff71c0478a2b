"""
CLI для hierbert
Запуск: `hierbert <command> [--config FILE] [--set key=value ...]`
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from hierbert.commands import COMMANDS
from hierbert.config import load_config
from hierbert.exceptions import HierBertError
from hierbert.settings import settings

logger = logging.getLogger("hierbert")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierbert", description="Hierarchical multitask BERT pre-training")
    parser.add_argument("--config", type=Path, default=None, help="TOML experiment config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set placement.nsp_layer=2 (repeatable)")
    parser.add_argument("--output", default=None, help="Output directory (default: paths.output_dir)")
    parser.add_argument("--seed", type=int, default=None, help="Run a single seed instead of config.seeds")
    parser.add_argument("--log-level", default=settings.log_level)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        config = load_config(args.config, args.overrides)
        if args.output is None and config.paths.output_dir == "runs":
            args.output = settings.output_dir
        return args.handler(args, config)
    except HierBertError as e:
        logger.error(f"❌ {e.error_code}: {e.message}")
        if e.details:
            logger.error(f"   details: {e.details}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
