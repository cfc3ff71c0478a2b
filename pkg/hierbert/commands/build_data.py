import logging

from hierbert.commands.common import output_dir, seeds
from hierbert.pipeline import build_data

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("build-data", help="Build vocabulary and example files")
    parser.set_defaults(handler=run)


def run(args, config) -> int:
    for seed in seeds(args, config):
        build_data(config, seed, output_dir(args, config) / "data" / f"seed_{seed}")
    return 0
