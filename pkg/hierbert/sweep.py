"""
Experiment matrix: placements x pre-training concat x fine-tuning concat x seeds.

`plan_sweep` decides validity of every cell before anything runs; `run_sweep`
pre-trains once per (placement, pt_concat, seed) and fine-tunes each valid
cell from its own copy of that checkpoint.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel

from hierbert.checkpoint import copy_checkpoint, load_checkpoint
from hierbert.config import ExperimentConfig, Variant, build_config
from hierbert.exceptions import HierBertError
from hierbert.heads import ConcatMode, intermediate_layers
from hierbert.pipeline import evaluate, finetune_examples, load_corpus, load_data, run_finetune, run_pretrain
from hierbert.probe import probe_datasets_for, probe_run
from hierbert.reports import ReportWriter, ResultRow
from hierbert.train import restore_model

logger = logging.getLogger(__name__)

PRIMARY_METRIC = {"qa": "f1", "nli": "accuracy", "probe": "bigram_shift_detection_accuracy"}


class SweepCell(BaseModel):
    variant: Variant
    mlm_layer: int
    nsp_layer: int
    pt_concat: ConcatMode
    ft_concat: ConcatMode
    task: str
    seed: int
    valid: bool = True
    reason: str = ""

    @property
    def placement_label(self) -> str:
        return f"mlm{self.mlm_layer}_nsp{self.nsp_layer}"

    @property
    def pretrain_key(self) -> Tuple:
        return (self.mlm_layer, self.nsp_layer, self.pt_concat.value, self.seed)


def _placements(config: ExperimentConfig) -> List[Tuple[int, int]]:
    top = config.encoder.num_layers
    variant = config.sweep.variant
    layers = config.sweep.nsp_layers or intermediate_layers(top)
    if variant in (Variant.LOWER_NSP, Variant.LOWER_NSP_FREEZE):
        return [(top, k) for k in layers]
    if variant is Variant.LOWER_MASK:
        return [(k, top) for k in layers]
    return [(top, top)]


def cell_config(base: ExperimentConfig, cell: SweepCell) -> ExperimentConfig:
    data = base.model_dump(mode="json")
    data.update({
        "variant": cell.variant.value,
        "placement": {"mlm_layer": cell.mlm_layer, "nsp_layer": cell.nsp_layer},
        "pt_concat": cell.pt_concat.value,
        "ft_concat": cell.ft_concat.value,
        "seeds": [cell.seed],
    })
    return build_config(data)


def _cell_problem(base: ExperimentConfig, cell: SweepCell) -> str:
    if cell.task == "nli" and cell.ft_concat is not ConcatMode.NONE:
        return "NLI fine-tuning reads only the [CLS] state; concatenation is not available"
    if cell.task == "probe" and cell.ft_concat is not ConcatMode.NONE:
        return "probing uses the frozen encoder; ft_concat does not apply"
    try:
        cell_config(base, cell)
    except HierBertError as e:
        return e.message.replace("\n", " ")
    return ""


def plan_sweep(config: ExperimentConfig) -> List[SweepCell]:
    """Every cell of the matrix with its validity verdict"""
    cells = []
    for seed in config.seeds:
        for mlm, nsp in _placements(config):
            for pt in config.sweep.pt_concats:
                for ft in config.sweep.ft_concats:
                    for task in config.sweep.tasks:
                        cell = SweepCell(variant=config.sweep.variant, mlm_layer=mlm, nsp_layer=nsp,
                                         pt_concat=pt, ft_concat=ft, task=task, seed=seed)
                        problem = _cell_problem(config, cell)
                        if problem:
                            cell.valid, cell.reason = False, problem
                        cells.append(cell)
    valid = sum(c.valid for c in cells)
    logger.info(f"Sweep plan: {len(cells)} cells, {valid} valid, {len(cells) - valid} rejected")
    return cells


def run_sweep(config: ExperimentConfig, out_dir: Path, cells: Optional[List[SweepCell]] = None) -> List[ResultRow]:
    """Run the valid cells; one result row per valid cell"""
    out_dir = Path(out_dir)
    cells = cells if cells is not None else plan_sweep(config)
    writer = ReportWriter(out_dir)
    pretrained: Dict[Tuple, Path] = {}
    rows: List[ResultRow] = []

    for cell in cells:
        if not cell.valid:
            logger.warning(f"⚠️  Skipping {cell.placement_label} pt={cell.pt_concat.value} "
                           f"ft={cell.ft_concat.value} {cell.task}: {cell.reason}")
            continue
        cfg = cell_config(config, cell)
        bundle = load_data(cfg, cell.seed, out_dir / "data" / f"seed_{cell.seed}_{cfg.config_hash[:12]}")
        pt_dir = out_dir / "pretrain" / f"{cell.placement_label}_pt-{cell.pt_concat.value}_seed{cell.seed}"
        if cell.pretrain_key not in pretrained:
            pretrained[cell.pretrain_key] = run_pretrain(cfg, cell.seed, bundle, pt_dir)
        source = pretrained[cell.pretrain_key]

        cell_dir = pt_dir / f"{cell.task}_ft-{cell.ft_concat.value}"
        private = copy_checkpoint(source, cell_dir / "pretrained")
        if cell.task == "probe":
            model = restore_model(load_checkpoint(private))
            dataset = probe_datasets_for(load_corpus(cfg), cell.seed, cfg.probe)["bigram_shift_detection"]
            probe_config = cfg.probe.model_copy(update={"seed": cell.seed})
            value = probe_run(model, bundle.vocab, dataset, probe_config).accuracy
        else:
            result = run_finetune(cfg, cell.seed, bundle, cell.task, cell.ft_concat, cell_dir / "finetuned",
                                  checkpoint_path=private)
            examples = finetune_examples(bundle, cfg, cell.task, "eval")
            split = "eval" if examples else "train"
            scores = evaluate(result.model, examples or finetune_examples(bundle, cfg, cell.task, "train"))
            result.report.log_scores(cell.task, scores, split=split)
            result.report.write_jsonl(cell_dir / "finetuned" / "metrics.jsonl")
            value = scores[PRIMARY_METRIC[cell.task]]

        row = ResultRow(variant=cell.variant.value, placement=cell.placement_label, pt_concat=cell.pt_concat.value,
                        ft_concat=cell.ft_concat.value, task=cell.task, metric=PRIMARY_METRIC[cell.task],
                        value=value, seed=cell.seed, config_hash=cfg.config_hash)
        writer.append(row)
        rows.append(row)
    logger.info(f"✓ Sweep finished: {len(rows)} rows written to {writer.csv_path}")
    return rows
