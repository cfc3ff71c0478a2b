import logging
from pathlib import Path

from hierbert.commands.common import data_for, output_dir, seeds
from hierbert.pipeline import run_pretrain

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("pretrain", help="Pre-train the configured variant")
    parser.add_argument("--resume", type=Path, default=None, help="Checkpoint directory to continue from")
    parser.set_defaults(handler=run)


def run(args, config) -> int:
    for seed in seeds(args, config):
        bundle = data_for(args, config, seed)
        path = run_pretrain(config, seed, bundle, output_dir(args, config) / "pretrain" / f"seed_{seed}",
                            resume=args.resume)
        logger.info(f"✓ Pre-training finished for seed {seed}: {path}")
    return 0
