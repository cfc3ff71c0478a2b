"""
Pre-training and fine-tuning loops and the NSP-freeze policy.

Every source of randomness is a named stream derived from the run seed
(initialisation, data order, dropout per step), and the data cursor is a pure
function of the step number, so a resumed run continues bit-exactly.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Set

import numpy as np
from pydantic import BaseModel, Field, model_validator

from hierbert.checkpoint import Checkpoint, save_checkpoint
from hierbert.datapipe import FinetuneBatch, FinetuneExample, PretrainBatch, PretrainExample, short_step_count
from hierbert.encoder import EncoderConfig
from hierbert.exceptions import ConcatModeError, ConfigurationError, NumericError
from hierbert.heads import ConcatMode, FinetuneModel, HeadPlacement, HierarchicalBert, LossWeights
from hierbert.optimizer import AdamAMSGrad
from hierbert.reports import MetricsReport, StepRecord
from hierbert.streams import make_stream
from hierbert.tensor import GradTape

logger = logging.getLogger(__name__)

PHASE_DEFAULTS = {
    "pretrain": {"lr": 1e-4, "weight_decay": 1e-4, "batch_size_short": 32, "batch_size_long": 1},
    "finetune": {"lr": 1e-5, "weight_decay": 0.0, "batch_size_short": 1, "batch_size_long": 1},
    "probe": {"lr": 1e-3, "weight_decay": 0.0, "batch_size_short": 32, "batch_size_long": 32},
}


class TrainConfig(BaseModel):
    """Unset optimiser fields take the defaults of their phase"""

    phase: Literal["pretrain", "finetune", "probe"] = "pretrain"
    lr: Optional[float] = Field(None, ge=0.0)
    weight_decay: Optional[float] = Field(None, ge=0.0)
    batch_size_short: Optional[int] = Field(None, ge=1)
    batch_size_long: Optional[int] = Field(None, ge=1)
    dropout_p: float = Field(0.1, ge=0.0, lt=1.0)
    total_steps: Optional[int] = Field(None, ge=1)
    epochs: int = Field(2, ge=1)
    seed: int = 0
    log_every: int = Field(10, ge=1)
    checkpoint_every: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def fill_phase_defaults(self):
        for key, value in PHASE_DEFAULTS[self.phase].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        return self


class FreezePolicy(BaseModel):
    enabled: bool = False
    trigger: Literal["fixed_fraction", "fixed_step", "nsp_loss_threshold"] = "fixed_fraction"
    fraction: float = Field(0.5, gt=0.0, lt=1.0)
    step: Optional[int] = Field(None, ge=1)
    threshold: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode="after")
    def trigger_has_value(self):
        if self.trigger == "fixed_step" and self.step is None:
            raise ValueError("freeze trigger 'fixed_step' needs freeze.step")
        if self.trigger == "nsp_loss_threshold" and self.threshold is None:
            raise ValueError("freeze trigger 'nsp_loss_threshold' needs freeze.threshold")
        return self

    def triggered(self, completed_steps: int, total_steps: int, nsp_loss: Optional[float]) -> bool:
        """Checked after each optimiser step"""
        if not self.enabled:
            return False
        if self.trigger == "fixed_fraction":
            return completed_steps >= int(np.ceil(self.fraction * total_steps))
        if self.trigger == "fixed_step":
            return completed_steps >= self.step
        return nsp_loss is not None and nsp_loss < self.threshold


def apply_freeze(model: HierarchicalBert) -> Set[str]:
    """
    Names of every parameter the NSP loss depends on: the embedding block,
    encoder layers 1..nsp_layer and the NSP head.
    """
    placement = model.placement
    if not placement.nsp_enabled:
        raise ConfigurationError("NSP-freeze needs the NSP head, which this placement disables",
                                 error_code="FREEZE_WITHOUT_NSP")
    prefixes = ["encoder.embeddings.", "nsp_head."]
    prefixes += [f"encoder.layers.{i}." for i in range(placement.nsp_layer)]
    return {name for name in model.parameters() if name.startswith(tuple(prefixes))}


def nsp_gradient_support(model: HierarchicalBert, batch: PretrainBatch) -> Set[str]:
    """Parameters with a nonzero NSP-loss gradient on `batch`; existing .grad values are left untouched"""
    if not model.placement.nsp_enabled:
        raise ConfigurationError("The NSP loss needs the NSP head, which this placement disables",
                                 error_code="FREEZE_WITHOUT_NSP")
    params = model.parameters()
    saved = {name: p.grad for name, p in params.items()}
    for p in params.values():
        p.grad = None
    with GradTape() as tape:
        losses = model.pretrain_loss(batch)
    tape.backward(losses.nsp_loss)
    support = {name for name, p in params.items() if p.grad is not None and np.any(p.grad != 0.0)}
    for name, p in params.items():
        p.grad = saved[name]
    return support


def parameter_checksum(params: Dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return digest.hexdigest()


# ============ Model construction ============

def build_model(encoder_config: EncoderConfig, placement: HeadPlacement, concat: ConcatMode, seed: int,
                tie_mlm_decoder: bool = False, nsp_concat_source: str = "logits",
                loss_weights: Optional[LossWeights] = None) -> HierarchicalBert:
    return HierarchicalBert(encoder_config, placement, concat, make_stream(seed, "init"),
                            tie_mlm_decoder=tie_mlm_decoder, nsp_concat_source=nsp_concat_source,
                            loss_weights=loss_weights)


def model_metadata(model: HierarchicalBert) -> Dict:
    """Everything needed to rebuild the model from a checkpoint"""
    return {
        "encoder": model.config.model_dump(mode="json"),
        "placement": model.placement.model_dump(mode="json"),
        "concat": model.concat.value,
        "nsp_concat_source": model.nsp_concat_source,
        "tie_mlm_decoder": model.mlm_head.tied,
        "loss_weights": model.loss_weights.model_dump(mode="json"),
    }


def restore_model(checkpoint: Checkpoint, strict: bool = True) -> HierarchicalBert:
    manifest = checkpoint.manifest
    model = HierarchicalBert(
        EncoderConfig.model_validate(manifest["encoder"]),
        HeadPlacement.model_validate(manifest["placement"]),
        ConcatMode(manifest["concat"]),
        make_stream(0, "restore"),
        tie_mlm_decoder=manifest.get("tie_mlm_decoder", False),
        nsp_concat_source=manifest.get("nsp_concat_source", "logits"),
        loss_weights=LossWeights.model_validate(manifest.get("loss_weights", {})),
    )
    model.load_state_dict(checkpoint.parameters, strict=strict)
    return model


def restore_finetuned(checkpoint: Checkpoint) -> FinetuneModel:
    """Rebuild a model saved after fine-tuning (its manifest names task and ft_concat)"""
    manifest = checkpoint.manifest
    base = restore_model(checkpoint, strict=False)
    model = FinetuneModel(base.encoder, base.placement, manifest["task"], ConcatMode(manifest["ft_concat"]),
                          make_stream(0, "restore"), nsp_head=base.nsp_head,
                          nsp_concat_source=base.nsp_concat_source)
    model.load_state_dict(checkpoint.parameters)
    return model


# ============ Data cursor ============

class PoolCursor:
    """
    Step -> batch mapping over one example pool.

    Epoch 0 reads the pool in order; each later epoch reads a permutation drawn
    from the stream (seed, "order", max_len, epoch).
    """

    def __init__(self, pool: Sequence[PretrainExample], max_len: int, seed: int):
        if not pool:
            raise ConfigurationError(f"No pre-training examples of length {max_len}")
        self.pool = pool
        self.max_len = max_len
        self.seed = seed
        self._orders: Dict[int, np.ndarray] = {}
        self.wrapped = False

    def _order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            n = len(self.pool)
            self._orders[epoch] = (np.arange(n) if epoch == 0
                                   else make_stream(self.seed, "order", self.max_len, epoch).permutation(n))
        return self._orders[epoch]

    def batch(self, phase_step: int, batch_size: int) -> List[PretrainExample]:
        n = len(self.pool)
        picked = []
        for k in range(phase_step * batch_size, (phase_step + 1) * batch_size):
            epoch, pos = divmod(k, n)
            if epoch > 0 and not self.wrapped:
                self.wrapped = True
                logger.warning(f"⚠️  Pool of length {self.max_len} exhausted ({n} examples); reshuffling")
            picked.append(self.pool[int(self._order(epoch)[pos])])
        return picked


# ============ Pre-training ============

@dataclass
class PretrainResult:
    model: HierarchicalBert
    optimizer: AdamAMSGrad
    report: MetricsReport
    frozen: Set[str] = field(default_factory=set)
    checkpoints: List[Path] = field(default_factory=list)


def pretrain(model: HierarchicalBert, pools: Dict[int, List[PretrainExample]], config: TrainConfig,
             freeze: Optional[FreezePolicy] = None, short_len: int = 128, long_len: int = 384,
             short_fraction: float = 0.9, start_step: int = 0, optimizer: Optional[AdamAMSGrad] = None,
             report: Optional[MetricsReport] = None, checkpoint_dir: Optional[Path] = None,
             checkpoint_config: Optional[Dict] = None, checkpoint_meta: Optional[Dict] = None,
             on_step: Optional[Callable[[int, HierarchicalBert], None]] = None) -> PretrainResult:
    """
    Run steps start_step..total_steps-1 of the length schedule.

    Passing back the optimizer (with its frozen set) and report of an earlier
    call, or the ones restored from a checkpoint, resumes the run.
    """
    if config.phase != "pretrain":
        raise ConfigurationError(f"pretrain() called with a {config.phase} config")
    if config.total_steps is None:
        raise ConfigurationError("pretrain.total_steps must be set", error_code="MISSING_TOTAL_STEPS")
    freeze = freeze or FreezePolicy()
    if freeze.enabled and not model.placement.nsp_enabled:
        raise ConfigurationError("NSP-freeze needs the NSP head, which this placement disables",
                                 error_code="FREEZE_WITHOUT_NSP")
    model.config.dropout_p = config.dropout_p
    for layer in model.encoder.layers:
        layer.dropout_p = config.dropout_p

    total = config.total_steps
    params = model.parameters()
    optimizer = optimizer or AdamAMSGrad(params, config.lr, config.weight_decay)
    report = report or MetricsReport(seed=config.seed)
    short_steps = short_step_count(total, short_fraction)
    cursors = {
        short_len: PoolCursor(pools.get(short_len, []), short_len, config.seed),
        long_len: PoolCursor(pools.get(long_len, []), long_len, config.seed) if total > short_steps else None,
    }
    checkpoints: List[Path] = []
    logger.info(f"🚀 Pre-training {model.placement.kind} steps {start_step}..{total - 1} "
                f"({short_steps} at length {short_len}), concat={model.concat.value}")

    for step in range(start_step, total):
        short = step < short_steps
        max_len = short_len if short else long_len
        batch_size = config.batch_size_short if short else config.batch_size_long
        phase_step = step if short else step - short_steps
        batch = PretrainBatch.from_examples(cursors[max_len].batch(phase_step, batch_size))

        optimizer.zero_grad()
        with GradTape() as tape:
            losses = model.pretrain_loss(batch, rng=make_stream(config.seed, "dropout", step), training=True)
        if not np.isfinite(losses.total.item()):
            raise NumericError(f"Non-finite pre-training loss at step {step}")
        tape.backward(losses.total)
        optimizer.step()

        values = losses.as_floats()
        report.log_step(StepRecord(step=step, phase="pretrain", max_len=max_len, frozen=bool(optimizer.frozen),
                                   **values))
        if step % config.log_every == 0 or step == total - 1:
            parts = " ".join(f"{k}={v:.4f}" for k, v in values.items())
            logger.info(f"step {step} len={max_len} {parts} frozen={bool(optimizer.frozen)}")

        if not optimizer.frozen and freeze.triggered(step + 1, total, values.get("nsp_loss")):
            optimizer.freeze(apply_freeze(model))
            report.freeze_step = step + 1
            logger.info(f"🧊 NSP-freeze triggered after step {step}: {len(optimizer.frozen)} parameters frozen")

        if on_step is not None:
            on_step(step, model)
        done = step + 1
        if checkpoint_dir is not None and config.checkpoint_every and (done % config.checkpoint_every == 0
                                                                        or done == total):
            path = Path(checkpoint_dir) / f"step_{done:06d}"
            save_checkpoint(path, model, optimizer, checkpoint_config or {}, done,
                            {**model_metadata(model), **(checkpoint_meta or {})})
            checkpoints.append(path)

    return PretrainResult(model=model, optimizer=optimizer, report=report, frozen=set(optimizer.frozen),
                          checkpoints=checkpoints)


# ============ Fine-tuning ============

@dataclass
class FinetuneResult:
    model: FinetuneModel
    optimizer: AdamAMSGrad
    report: MetricsReport


def check_finetune_request(checkpoint: Optional[Checkpoint], task: str, ft_concat: ConcatMode,
                           from_scratch: bool = False):
    """Reject inconsistent fine-tuning requests before any compute"""
    ft_concat = ConcatMode(ft_concat)
    if task not in ("qa", "nli"):
        raise ConfigurationError(f"Unknown fine-tuning task {task!r}", error_code="UNKNOWN_TASK")
    if task == "nli" and ft_concat is not ConcatMode.NONE:
        raise ConcatModeError(
            "NLI fine-tuning reads only the [CLS] state at the NSP layer; concatenation is not available",
            {"task": task, "ft_concat": ft_concat.value},
        )
    if checkpoint is None and not from_scratch:
        raise ConfigurationError("Fine-tuning needs a checkpoint unless from_scratch is set",
                                 error_code="MISSING_CHECKPOINT")
    if ft_concat is ConcatMode.NSP_OUTPUT:
        has_nsp = checkpoint.has_nsp_head() if checkpoint is not None else False
        if not has_nsp:
            raise ConcatModeError(
                "ft_concat=nsp_output needs an NSP head, but the checkpoint has none",
                {"task": task, "ft_concat": ft_concat.value},
            )


def finetune(checkpoint: Optional[Checkpoint], task: str, examples: Sequence[FinetuneExample],
             config: TrainConfig, ft_concat: ConcatMode = ConcatMode.NONE, from_scratch: bool = False,
             encoder_config: Optional[EncoderConfig] = None, placement: Optional[HeadPlacement] = None
             ) -> FinetuneResult:
    """
    Fine-tune every encoder parameter plus a fresh QA or NLI head.

    With `from_scratch` the encoder is freshly initialised from
    `encoder_config`/`placement` instead of a checkpoint.
    """
    ft_concat = ConcatMode(ft_concat)
    check_finetune_request(checkpoint, task, ft_concat, from_scratch)
    if not examples:
        raise ConfigurationError(f"No {task} fine-tuning examples")

    if checkpoint is not None:
        base = restore_model(checkpoint)
    else:
        if encoder_config is None or placement is None:
            raise ConfigurationError("from_scratch fine-tuning needs encoder_config and placement")
        base = build_model(encoder_config, placement, ConcatMode.NONE, config.seed)
    for layer in base.encoder.layers:
        layer.dropout_p = config.dropout_p
    base.encoder.config.dropout_p = config.dropout_p

    model = FinetuneModel(base.encoder, base.placement, task, ft_concat, make_stream(config.seed, "ft_head"),
                          nsp_head=base.nsp_head, nsp_concat_source=base.nsp_concat_source)
    optimizer = AdamAMSGrad(model.parameters(), config.lr, config.weight_decay)
    report = MetricsReport(seed=config.seed)
    batch_size = config.batch_size_short
    logger.info(f"🚀 Fine-tuning {task} for {config.epochs} epochs on {len(examples)} examples "
                f"(ft_concat={ft_concat.value}, from_scratch={from_scratch})")

    step = 0
    for epoch in range(config.epochs):
        order = make_stream(config.seed, "ft_order", epoch).permutation(len(examples))
        for i in range(0, len(order), batch_size):
            batch = FinetuneBatch.from_examples([examples[int(k)] for k in order[i:i + batch_size]])
            optimizer.zero_grad()
            with GradTape() as tape:
                loss = model.loss(batch, rng=make_stream(config.seed, "ft_dropout", step), training=True)
            if not np.isfinite(loss.item()):
                raise NumericError(f"Non-finite fine-tuning loss at step {step}")
            tape.backward(loss)
            optimizer.step()
            report.log_step(StepRecord(step=step, phase="finetune", total=loss.item(), task_loss=loss.item()))
            if step % config.log_every == 0:
                logger.info(f"finetune {task} epoch {epoch} step {step} loss={loss.item():.4f}")
            step += 1

    return FinetuneResult(model=model, optimizer=optimizer, report=report)


def resume_from_checkpoint(checkpoint: Checkpoint, config: TrainConfig):
    """(model, optimizer) restored so that pretrain(start_step=checkpoint.step) continues the run"""
    model = restore_model(checkpoint)
    optimizer = AdamAMSGrad(model.parameters(), config.lr, config.weight_decay, state=checkpoint.optimizer_state)
    optimizer.freeze(checkpoint.frozen)
    return model, optimizer
