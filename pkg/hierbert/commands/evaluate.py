import logging
from pathlib import Path

from hierbert.checkpoint import load_checkpoint
from hierbert.commands.common import data_for, output_dir, placement_label, seeds
from hierbert.exceptions import InputError
from hierbert.pipeline import evaluate, finetune_examples
from hierbert.reports import MetricsReport, ReportWriter, ResultRow
from hierbert.train import restore_finetuned

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("eval", help="Evaluate a fine-tuned checkpoint")
    parser.add_argument("--checkpoint", type=Path, required=True, help="Fine-tuned checkpoint directory")
    parser.add_argument("--split", choices=["train", "eval"], default="eval")
    parser.set_defaults(handler=run)


def run(args, config) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_finetuned(checkpoint)
    seed = seeds(args, config)[0]
    examples = finetune_examples(data_for(args, config, seed), config, model.task, args.split)
    if not examples:
        raise InputError(f"No {model.task} {args.split} examples", {f"{model.task}_{args.split}": 0})
    scores = evaluate(model, examples)
    for metric, value in scores.items():
        logger.info(f"📊 {model.task} {metric} = {value:.2f}")
    report = MetricsReport(config_hash=checkpoint.manifest.get("config_hash", ""),
                           seed=checkpoint.manifest.get("seed", seed))
    report.log_scores(model.task, scores, split=args.split, step=checkpoint.step)
    report.write_jsonl(Path(args.checkpoint).parent / "metrics.jsonl", append=True)
    ReportWriter(output_dir(args, config)).extend([
        ResultRow(variant=checkpoint.manifest.get("variant", config.variant.value),
                  placement=placement_label(checkpoint.placement), pt_concat=checkpoint.concat,
                  ft_concat=checkpoint.manifest["ft_concat"], task=model.task, metric=metric, value=value,
                  seed=checkpoint.manifest.get("seed", seed), config_hash=checkpoint.manifest.get("config_hash", ""))
        for metric, value in scores.items()
    ])
    return 0
