import logging
from pathlib import Path

from hierbert.commands.common import data_for, output_dir, placement_label, seeds
from hierbert.heads import ConcatMode
from hierbert.pipeline import evaluate, finetune_examples, run_finetune
from hierbert.reports import ReportWriter, ResultRow

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("finetune", help="Fine-tune on QA or NLI")
    parser.add_argument("--task", choices=["qa", "nli"], required=True)
    parser.add_argument("--checkpoint", type=Path, default=None, help="Pre-trained checkpoint directory")
    parser.add_argument("--ft-concat", choices=[m.value for m in ConcatMode], default=None,
                        help="Overrides ft_concat from the config")
    parser.add_argument("--from-scratch", action="store_true", help="Fine-tune a freshly initialised encoder")
    parser.set_defaults(handler=run)


def run(args, config) -> int:
    ft_concat = ConcatMode(args.ft_concat or config.ft_concat)
    out = output_dir(args, config)
    writer = ReportWriter(out)
    for seed in seeds(args, config):
        bundle = data_for(args, config, seed)
        run_dir = out / "finetune" / args.task / f"seed_{seed}"
        result = run_finetune(config, seed, bundle, args.task, ft_concat, run_dir,
                              checkpoint_path=args.checkpoint, from_scratch=args.from_scratch)
        examples = finetune_examples(bundle, config, args.task, "eval")
        if not examples:
            logger.warning(f"⚠️  No {args.task} eval split; skipping evaluation")
            continue
        placement = result.model.placement.model_dump()
        pt_concat = "scratch" if args.from_scratch else config.pt_concat.value
        scores = evaluate(result.model, examples)
        result.report.log_scores(args.task, scores, split="eval")
        result.report.write_jsonl(run_dir / "metrics.jsonl")
        writer.extend([
            ResultRow(variant=config.variant.value, placement=placement_label(placement), pt_concat=pt_concat,
                      ft_concat=ft_concat.value, task=args.task, metric=metric, value=value, seed=seed,
                      config_hash=config.config_hash)
            for metric, value in scores.items()
        ])
    return 0
