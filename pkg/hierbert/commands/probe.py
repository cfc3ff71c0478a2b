import logging
from pathlib import Path

from hierbert.checkpoint import load_checkpoint
from hierbert.commands.common import data_for, output_dir, placement_label, seeds
from hierbert.pipeline import load_corpus
from hierbert.probe import PROBE_TASKS, compare_bigram_probe, probe_datasets_for, probe_run
from hierbert.reports import ReportWriter, ResultRow
from hierbert.train import restore_model

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("probe", help="Probe a frozen pre-trained encoder")
    parser.add_argument("--checkpoint", type=Path, default=None, help="Pre-trained checkpoint directory")
    parser.add_argument("--tasks", nargs="+", choices=PROBE_TASKS, default=list(PROBE_TASKS))
    parser.add_argument("--compare-bigram", action="store_true",
                        help="Pre-train with and without the bigram objective per seed and compare")
    parser.set_defaults(handler=run)


def run(args, config) -> int:
    corpus = load_corpus(config)
    writer = ReportWriter(output_dir(args, config))

    if args.compare_bigram:
        bundle = data_for(args, config, seeds(args, config)[0])
        results = compare_bigram_probe(corpus, bundle.vocab, config.encoder, config.pretrain, config.data,
                                       seeds(args, config), config.probe)
        rows = []
        for r in results:
            for variant, value in (("bigram_shift", r.with_bigram), ("bert_baseline", r.without_bigram)):
                rows.append(ResultRow(variant=variant, placement="top", pt_concat="none", ft_concat="none",
                                      task="bigram_shift_detection", metric="accuracy", value=value,
                                      seed=r.seed, config_hash=config.config_hash))
        writer.extend(rows)
        return 0

    if args.checkpoint is None:
        logger.error("probe needs --checkpoint (or --compare-bigram)")
        return 2
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_model(checkpoint)
    seed = checkpoint.manifest.get("seed", seeds(args, config)[0])
    bundle = data_for(args, config, seed)
    datasets = probe_datasets_for(corpus, seed, config.probe)
    rows = []
    for task in args.tasks:
        result = probe_run(model, bundle.vocab, datasets[task], config.probe.model_copy(update={"seed": seed}))
        rows.append(ResultRow(variant=checkpoint.manifest.get("variant", config.variant.value),
                              placement=placement_label(checkpoint.placement), pt_concat=checkpoint.concat,
                              ft_concat="none", task=task, metric="accuracy", value=result.accuracy, seed=seed,
                              config_hash=checkpoint.manifest.get("config_hash", config.config_hash)))
    writer.extend(rows)
    return 0
