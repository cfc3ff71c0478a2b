"""
Общие помощники для модулей команд
"""

from pathlib import Path
from typing import List

from hierbert.config import ExperimentConfig
from hierbert.pipeline import DataBundle, load_data


def output_dir(args, config: ExperimentConfig) -> Path:
    return Path(args.output or config.paths.output_dir)


def seeds(args, config: ExperimentConfig) -> List[int]:
    return [args.seed] if args.seed is not None else list(config.seeds)


def data_for(args, config: ExperimentConfig, seed: int) -> DataBundle:
    return load_data(config, seed, output_dir(args, config) / "data" / f"seed_{seed}")


def placement_label(placement: dict) -> str:
    return f"mlm{placement['mlm_layer']}_nsp{placement['nsp_layer']}"
