"""
End-to-end steps shared by the CLI commands and the sweep runner.

Artifact layout under an output directory:

    data/            vocab.json, pretrain_<len>.jsonl, <task>_<split>.jsonl, manifest.json
    pretrain/seed_<s>/checkpoint/, metrics.jsonl
    finetune/<task>/seed_<s>/checkpoint/, metrics.jsonl
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

from hierbert.checkpoint import load_checkpoint, save_checkpoint
from hierbert.config import ExperimentConfig
from hierbert.datapipe import (
    FinetuneExample, NliRecord, PretrainExample, QaRecord, Vocab, build_finetune_examples,
    build_pretrain_examples, build_vocab, coverage, read_corpus, read_examples, write_examples, write_manifest,
)
from hierbert.exceptions import ConfigurationError, InputError
from hierbert.heads import ConcatMode, FinetuneModel
from hierbert.metrics import evaluate_nli, evaluate_qa
from hierbert.reports import MetricsReport
from hierbert.train import (
    FinetuneResult, build_model, finetune, model_metadata, pretrain, resume_from_checkpoint,
)

logger = logging.getLogger(__name__)


@dataclass
class DataBundle:
    vocab: Vocab
    pools: Dict[int, List[PretrainExample]]
    directory: Path


def _records(path: Optional[str], task: str) -> List:
    if not path:
        return []
    model = QaRecord if task == "qa" else NliRecord
    with open(path, encoding="utf-8") as f:
        return [model.model_validate_json(line) for line in f if line.strip()]


def load_corpus(config: ExperimentConfig) -> List[List[str]]:
    if not config.paths.corpus:
        raise InputError("paths.corpus is not set", {"corpus": 0})
    corpus_path = Path(config.paths.corpus)
    if not corpus_path.is_file():
        raise InputError(f"Corpus not found: {corpus_path}", {"corpus": 0})
    return read_corpus(corpus_path)


def build_data(config: ExperimentConfig, seed: int, out_dir: Path) -> DataBundle:
    """Vocabulary, pre-training pools and fine-tuning example files, plus a manifest"""
    documents = load_corpus(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    vocab = build_vocab(documents, config.data.min_freq, config.data.max_vocab)
    vocab.save(out_dir / "vocab.json")
    pools = build_pretrain_examples(documents, vocab, config.data, seed,
                                    bigram_shift=config.head_placement().bigram_shift_enabled)
    files = {}
    counts = {}
    for max_len, pool in pools.items():
        name = f"pretrain_{max_len}.jsonl"
        files[name] = write_examples(out_dir / name, pool)
        counts[name] = len(pool)

    for task, max_len in (("qa", config.data.qa_max_len), ("nli", config.data.nli_max_len)):
        for split in ("train", "eval"):
            records = _records(getattr(config.paths, f"{task}_{split}"), task)
            if not records:
                continue
            built = build_finetune_examples(task, records, vocab, max_len)
            name = f"{task}_{split}.jsonl"
            files[name] = write_examples(out_dir / name, built.examples)
            counts[name] = len(built.examples)
            counts[f"{name}.skipped"] = built.skipped

    write_manifest(out_dir / "manifest.json", {
        "config_hash": config.config_hash,
        "seed": seed,
        "vocab_checksum": vocab.checksum,
        "vocab_size": len(vocab),
        "corpus_coverage": coverage(vocab, documents),
        "counts": counts,
        "sha256": files,
    })
    logger.info(f"✓ Data written to {out_dir}: {counts}")
    return DataBundle(vocab=vocab, pools=pools, directory=out_dir)


def load_data(config: ExperimentConfig, seed: int, data_dir: Path) -> DataBundle:
    """Reuse example files written for the same config and seed, else rebuild them"""
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("config_hash") == config.config_hash and manifest.get("seed") == seed:
            vocab = Vocab.load(data_dir / "vocab.json")
            pools = {n: read_examples(data_dir / f"pretrain_{n}.jsonl")
                     for n in sorted({config.data.short_len, config.data.long_len})}
            return DataBundle(vocab=vocab, pools=pools, directory=data_dir)
    return build_data(config, seed, data_dir)


def finetune_examples(bundle: DataBundle, config: ExperimentConfig, task: str, split: str) -> List[FinetuneExample]:
    path = bundle.directory / f"{task}_{split}.jsonl"
    if path.is_file():
        return read_examples(path, FinetuneExample)
    records = _records(getattr(config.paths, f"{task}_{split}"), task)
    max_len = config.data.qa_max_len if task == "qa" else config.data.nli_max_len
    return build_finetune_examples(task, records, bundle.vocab, max_len).examples


def provenance(config: ExperimentConfig, seed: int, vocab: Vocab) -> Dict:
    return {"config_hash": config.config_hash, "seed": seed, "vocab_checksum": vocab.checksum,
            "variant": config.variant.value}


# ============ Pre-training ============

def run_pretrain(config: ExperimentConfig, seed: int, bundle: DataBundle, out_dir: Path,
                 resume: Optional[Path] = None) -> Path:
    """Pre-train one model; returns the final checkpoint directory"""
    out_dir = Path(out_dir)
    train_config = config.pretrain.model_copy(update={"seed": seed})
    placement = config.head_placement()
    meta = provenance(config, seed, bundle.vocab)
    report = MetricsReport(config_hash=config.config_hash, seed=seed)

    start_step, optimizer = 0, None
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        model, optimizer = resume_from_checkpoint(checkpoint, train_config)
        start_step = checkpoint.step
        logger.info(f"Resuming from {resume} at step {start_step}")
    else:
        model = build_model(config.encoder, placement, config.pt_concat, seed, config.tie_mlm_decoder,
                            config.nsp_concat_source, config.loss_weights)

    result = pretrain(model, bundle.pools, train_config, config.freeze_policy(),
                      short_len=config.data.short_len, long_len=config.data.long_len,
                      short_fraction=config.data.short_fraction, start_step=start_step, optimizer=optimizer,
                      report=report, checkpoint_dir=out_dir / "steps",
                      checkpoint_config=config.model_dump(mode="json"), checkpoint_meta=meta)
    final = save_checkpoint(out_dir / "checkpoint", result.model, result.optimizer, config.model_dump(mode="json"),
                            train_config.total_steps, {**model_metadata(result.model), **meta, "phase": "pretrain"})
    result.report.write_jsonl(out_dir / "metrics.jsonl")
    return final


# ============ Fine-tuning ============

def run_finetune(config: ExperimentConfig, seed: int, bundle: DataBundle, task: str, ft_concat: ConcatMode,
                 out_dir: Path, checkpoint_path: Optional[Path] = None, from_scratch: bool = False
                 ) -> FinetuneResult:
    if checkpoint_path is None and not from_scratch:
        raise ConfigurationError("finetune needs --checkpoint or --from-scratch", error_code="MISSING_CHECKPOINT")
    checkpoint = load_checkpoint(checkpoint_path) if checkpoint_path is not None else None
    examples = finetune_examples(bundle, config, task, "train")
    if not examples:
        raise InputError(f"No {task} training examples", {f"{task}_train": 0})

    train_config = config.finetune.model_copy(update={"seed": seed})
    result = finetune(checkpoint, task, examples, train_config, ft_concat, from_scratch=from_scratch,
                      encoder_config=config.encoder, placement=config.head_placement())
    out_dir = Path(out_dir)
    base_meta = checkpoint.manifest if checkpoint is not None else {
        "encoder": config.encoder.model_dump(mode="json"),
        "placement": config.head_placement().model_dump(mode="json"),
        "concat": ConcatMode.NONE.value,
    }
    meta = {key: base_meta[key] for key in ("encoder", "placement", "concat")}
    meta.update(provenance(config, seed, bundle.vocab))
    meta.update({"phase": "finetune", "task": task, "ft_concat": ConcatMode(ft_concat).value,
                 "from_scratch": from_scratch, "nsp_concat_source": result.model.nsp_concat_source})
    save_checkpoint(out_dir / "checkpoint", result.model, result.optimizer, config.model_dump(mode="json"),
                    len(result.report.steps), meta)
    result.report.config_hash = config.config_hash
    result.report.write_jsonl(out_dir / "metrics.jsonl")
    return result


def evaluate(model: FinetuneModel, examples: List[FinetuneExample]) -> Dict[str, float]:
    if model.task == "qa":
        scores = evaluate_qa(model, examples)
        return {"exact_match": scores.exact_match, "f1": scores.f1}
    return {"accuracy": evaluate_nli(model, examples)}
