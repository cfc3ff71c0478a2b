"""
Task heads tapped at configurable encoder layers.

The hierarchy lives entirely in `HeadPlacement`: the NSP head reads the [CLS]
state of `nsp_layer`, the masked-LM and bigram-shift heads read token states
of `mlm_layer`. The masked-LM classifier can additionally see a sentence
vector (the [CLS] state, or the NSP classifier output) appended to every
input row.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from hierbert.datapipe import FinetuneBatch, IGNORE_INDEX, PretrainBatch
from hierbert.encoder import Encoder, EncoderConfig, EncoderOutput
from hierbert.exceptions import ConcatModeError, HeadDisabledError, PlacementError
from hierbert.layers import LayerNorm, Linear, Module, parameter
from hierbert.tensor import (
    Tensor, add, concat, cross_entropy, gather_rows, gelu, mask_fill, matmul, reshape, scale, softmax,
    transpose,
)

logger = logging.getLogger(__name__)


class ConcatMode(str, Enum):
    NONE = "none"
    CLS_EMBEDDING = "cls_embedding"
    NSP_OUTPUT = "nsp_output"

    def width(self, hidden_size: int) -> int:
        """Size of the vector appended to each classifier input"""
        return {ConcatMode.NONE: 0, ConcatMode.CLS_EMBEDDING: hidden_size, ConcatMode.NSP_OUTPUT: 2}[self]


class HeadPlacement(BaseModel):
    mlm_layer: int = Field(..., ge=1)
    nsp_layer: int = Field(..., ge=1)
    nsp_enabled: bool = True
    bigram_shift_enabled: bool = False

    def validate_for(self, num_layers: int) -> "HeadPlacement":
        for name in ("mlm_layer", "nsp_layer"):
            value = getattr(self, name)
            if not 1 <= value <= num_layers:
                raise PlacementError(
                    f"{name}={value} outside the encoder's layers 1..{num_layers}",
                    {"field": name, "value": value, "num_layers": num_layers},
                )
        return self

    @property
    def kind(self) -> str:
        if self.nsp_enabled and self.nsp_layer < self.mlm_layer:
            return "lower_nsp"
        if self.nsp_enabled and self.mlm_layer < self.nsp_layer:
            return "lower_mask"
        return "shared_layer"

    @property
    def deepest_tap(self) -> int:
        return max(self.mlm_layer, self.nsp_layer) if self.nsp_enabled else self.mlm_layer


def intermediate_layers(num_layers: int) -> List[int]:
    """Admissible layers for a lowered head: every layer below the top"""
    return list(range(1, num_layers))


class LossWeights(BaseModel):
    mlm: float = Field(1.0, ge=0.0)
    nsp: float = Field(1.0, ge=0.0)
    bigram: float = Field(1.0, ge=0.0)


@dataclass
class PretrainLossBreakdown:
    mlm_loss: Tensor
    nsp_loss: Optional[Tensor]
    bigram_loss: Optional[Tensor]
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        values = {"mlm_loss": self.mlm_loss, "nsp_loss": self.nsp_loss,
                  "bigram_loss": self.bigram_loss, "total": self.total}
        return {k: v.item() for k, v in values.items() if v is not None}


# ============ Heads ============

class NspHead(Module):
    def __init__(self, hidden_size: int, rng: np.random.Generator, std: float = 0.02):
        self.classifier = Linear(hidden_size, 2, rng, std=std)

    def __call__(self, cls_state: Tensor) -> Tensor:
        return self.classifier(cls_state)


class MlmHead(Module):
    """affine -> gelu -> layer norm -> vocabulary projection"""

    def __init__(self, in_width: int, hidden_size: int, vocab_size: int, rng: np.random.Generator,
                 tied: bool = False, eps: float = 1e-12, std: float = 0.02):
        self.in_width = in_width
        self.transform = Linear(in_width, hidden_size, rng, std=std)
        self.norm = LayerNorm(hidden_size, eps)
        self.tied = tied
        if tied:
            self.decoder_bias = parameter(np.zeros(vocab_size))
        else:
            self.decoder = Linear(hidden_size, vocab_size, rng, std=std)

    def __call__(self, rows: Tensor, token_table: Optional[Tensor] = None) -> Tensor:
        h = self.norm(gelu(self.transform(rows)))
        if self.tied:
            return add(matmul(h, transpose(token_table)), self.decoder_bias)
        return self.decoder(h)


class BigramShiftHead(Module):
    def __init__(self, hidden_size: int, rng: np.random.Generator, std: float = 0.02):
        self.classifier = Linear(hidden_size, 2, rng, std=std)

    def __call__(self, token_states: Tensor) -> Tensor:
        return self.classifier(token_states)


def _as_batch(states: Tensor) -> Tensor:
    return reshape(states, (1,) + states.shape) if states.ndim == 2 else states


def cls_states(layer_output: Tensor) -> Tensor:
    """[CLS] (position 0) row of every sequence: [batch×seq×hidden] -> [batch×hidden]"""
    b, s, h = layer_output.shape
    return gather_rows(reshape(layer_output, (b * s, h)), np.arange(b) * s, table="cls positions")


def broadcast_rows(sentence_vec: Tensor, batch_index: np.ndarray) -> Tensor:
    """Repeat per-sequence vectors onto the rows that belong to each sequence"""
    return gather_rows(sentence_vec, batch_index, table="sentence vectors")


# ============ Pre-training model ============

class HierarchicalBert(Module):
    """Encoder plus NSP, masked-LM and bigram-shift heads at their tap layers"""

    def __init__(self, config: EncoderConfig, placement: HeadPlacement, concat: ConcatMode,
                 rng: np.random.Generator, tie_mlm_decoder: bool = False,
                 nsp_concat_source: str = "logits", loss_weights: Optional[LossWeights] = None):
        placement.validate_for(config.num_layers)
        concat = ConcatMode(concat)
        if concat is ConcatMode.NSP_OUTPUT and not placement.nsp_enabled:
            raise ConcatModeError(
                "nsp_output concatenation needs the NSP head, which this placement disables",
                {"concat": concat.value, "nsp_enabled": False},
            )
        self.config = config
        self.placement = placement
        self.concat = concat
        self.nsp_concat_source = nsp_concat_source
        self.loss_weights = loss_weights or LossWeights()
        h = config.hidden_size

        self.encoder = Encoder(config, rng)
        self.nsp_head = NspHead(h, rng, config.init_std) if placement.nsp_enabled else None
        self.mlm_head = MlmHead(h + concat.width(h), h, config.vocab_size, rng,
                                tied=tie_mlm_decoder, eps=config.layer_norm_eps, std=config.init_std)
        self.bigram_head = BigramShiftHead(h, rng, config.init_std) if placement.bigram_shift_enabled else None

    def nsp_forward(self, cls_at_tap: Tensor) -> Tensor:
        """Two-class logits (is_next, not_next) from [CLS] states at nsp_layer"""
        if self.nsp_head is None:
            raise HeadDisabledError("nsp")
        return self.nsp_head(cls_at_tap)

    def sentence_vector(self, output: EncoderOutput, nsp_logits: Optional[Tensor] = None) -> Optional[Tensor]:
        """The vector appended to masked-LM inputs under the current concat mode, [batch×width]"""
        if self.concat is ConcatMode.NONE:
            return None
        if self.concat is ConcatMode.CLS_EMBEDDING:
            tap = self.placement.nsp_layer if self.placement.nsp_enabled else self.placement.mlm_layer
            return cls_states(_as_batch(output.layer(tap)))
        if nsp_logits is None:
            nsp_logits = self.nsp_forward(cls_states(_as_batch(output.layer(self.placement.nsp_layer))))
        return softmax(nsp_logits, axis=-1) if self.nsp_concat_source == "probabilities" else nsp_logits

    def mlm_forward(self, token_states_at_tap: Tensor, concat: ConcatMode, sentence_vec: Optional[Tensor],
                    masked_positions) -> Tensor:
        """
        Vocabulary logits at masked positions, one row per position.

        For a single sequence `masked_positions` are sequence positions; for a
        batch they are flat indices into batch*seq.
        """
        concat = ConcatMode(concat)
        states = _as_batch(token_states_at_tap)
        b, s, h = states.shape
        positions = np.asarray(masked_positions, dtype=np.int64).reshape(-1)

        if concat is not self.concat:
            raise ConcatModeError(
                f"Masked-LM head was built for concat={self.concat.value}, got {concat.value}",
                {"expected": self.concat.value, "got": concat.value},
            )
        if (sentence_vec is None) != (concat is ConcatMode.NONE):
            raise ConcatModeError(
                f"concat={concat.value} {'forbids' if sentence_vec is not None else 'requires'} a sentence vector",
                {"concat": concat.value},
            )

        rows = gather_rows(reshape(states, (b * s, h)), positions, table="masked positions")
        if sentence_vec is not None:
            vec = reshape(sentence_vec, (1, sentence_vec.shape[0])) if sentence_vec.ndim == 1 else sentence_vec
            if vec.shape != (b, concat.width(h)):
                raise ConcatModeError(
                    f"concat={concat.value} expects sentence vectors of width {concat.width(h)}, got {vec.shape}",
                    {"concat": concat.value, "shape": list(vec.shape)},
                )
            rows = concat_rows(rows, broadcast_rows(vec, positions // s))
        token_table = self.encoder.embeddings.token if self.mlm_head.tied else None
        return self.mlm_head(rows, token_table)

    def bigram_shift_forward(self, token_states: Tensor) -> Tensor:
        """Per-token (in_place, displaced) logits"""
        if self.bigram_head is None:
            raise HeadDisabledError("bigram_shift")
        return self.bigram_head(token_states)

    def pretrain_loss(self, batch: PretrainBatch, rng: Optional[np.random.Generator] = None,
                      training: bool = False) -> PretrainLossBreakdown:
        """One encoder pass; each head reads its own tap; weighted sum of enabled losses"""
        placement, weights = self.placement, self.loss_weights
        embedded = self.encoder.embed(batch.token_ids, batch.segment_ids, rng, training)
        output = self.encoder.encode(embedded, batch.attention_mask, rng, training,
                                     num_layers=placement.deepest_tap)
        b, s = batch.token_ids.shape

        nsp_logits = nsp_loss = None
        if placement.nsp_enabled:
            nsp_logits = self.nsp_forward(cls_states(output.layer(placement.nsp_layer)))
            nsp_loss = cross_entropy(nsp_logits, batch.nsp_labels)

        labels = batch.mlm_labels.reshape(-1)
        positions = np.nonzero(labels != IGNORE_INDEX)[0]
        mlm_logits = self.mlm_forward(output.layer(placement.mlm_layer), self.concat,
                                      self.sentence_vector(output, nsp_logits), positions)
        mlm_loss = cross_entropy(mlm_logits, labels[positions])

        bigram_loss = None
        if placement.bigram_shift_enabled:
            logits = self.bigram_shift_forward(output.layer(placement.mlm_layer))
            bigram_loss = cross_entropy(reshape(logits, (b * s, 2)), batch.bigram_labels.reshape(-1))

        total = scale(mlm_loss, weights.mlm)
        if nsp_loss is not None:
            total = add(total, scale(nsp_loss, weights.nsp))
        if bigram_loss is not None:
            total = add(total, scale(bigram_loss, weights.bigram))
        return PretrainLossBreakdown(mlm_loss=mlm_loss, nsp_loss=nsp_loss, bigram_loss=bigram_loss, total=total)


def concat_rows(rows: Tensor, extra: Tensor) -> Tensor:
    return concat([rows, extra], axis=-1)


# ============ Fine-tuning model ============

class FinetuneModel(Module):
    """
    Pre-trained encoder with a QA span head (token states at mlm_layer) or an
    NLI head (3 classes over the [CLS] state at nsp_layer).
    """

    def __init__(self, encoder: Encoder, placement: HeadPlacement, task: str, ft_concat: ConcatMode,
                 rng: np.random.Generator, nsp_head: Optional[NspHead] = None,
                 nsp_concat_source: str = "logits"):
        ft_concat = ConcatMode(ft_concat)
        h = encoder.config.hidden_size
        if task == "nli" and ft_concat is not ConcatMode.NONE:
            raise ConcatModeError(
                "NLI fine-tuning reads only the [CLS] state at the NSP layer; concatenation is not available",
                {"task": task, "ft_concat": ft_concat.value},
            )
        if ft_concat is ConcatMode.NSP_OUTPUT and nsp_head is None:
            raise ConcatModeError(
                "ft_concat=nsp_output needs an NSP head, but the checkpoint has none",
                {"task": task, "ft_concat": ft_concat.value},
            )
        if task not in ("qa", "nli"):
            raise ConcatModeError(f"Unknown fine-tuning task {task!r}", {"task": task})

        self.task = task
        self.placement = placement
        self.ft_concat = ft_concat
        self.nsp_concat_source = nsp_concat_source
        self.encoder = encoder
        self.nsp_head = nsp_head if ft_concat is ConcatMode.NSP_OUTPUT else None
        std = encoder.config.init_std
        if task == "qa":
            self.qa_outputs = Linear(h + ft_concat.width(h), 2, rng, std=std)
        else:
            self.nli_classifier = Linear(h, 3, rng, std=std)

    def _encode(self, batch: FinetuneBatch, rng, training) -> EncoderOutput:
        embedded = self.encoder.embed(batch.token_ids, batch.segment_ids, rng, training)
        return self.encoder.encode(embedded, batch.attention_mask, rng, training,
                                   num_layers=max(self.placement.mlm_layer, self.placement.nsp_layer))

    def qa_logits(self, batch: FinetuneBatch, rng: Optional[np.random.Generator] = None,
                  training: bool = False):
        """(start_logits, end_logits), each [batch×seq]; padding positions filled with the mask score"""
        output = self._encode(batch, rng, training)
        states = output.layer(self.placement.mlm_layer)
        b, s, h = states.shape
        rows = reshape(states, (b * s, h))

        if self.ft_concat is not ConcatMode.NONE:
            cls = cls_states(output.layer(self.placement.nsp_layer))
            if self.ft_concat is ConcatMode.NSP_OUTPUT:
                cls = self.nsp_head(cls)
                if self.nsp_concat_source == "probabilities":
                    cls = softmax(cls, axis=-1)
            rows = concat_rows(rows, broadcast_rows(cls, np.repeat(np.arange(b), s)))

        per_position = transpose(self.qa_outputs(rows))
        start = reshape(gather_rows(per_position, [0], table="span logits"), (b, s))
        end = reshape(gather_rows(per_position, [1], table="span logits"), (b, s))
        keep = np.asarray(batch.attention_mask, dtype=bool)
        return mask_fill(start, keep), mask_fill(end, keep)

    def qa_loss(self, batch: FinetuneBatch, rng=None, training: bool = False) -> Tensor:
        start, end = self.qa_logits(batch, rng, training)
        return scale(add(cross_entropy(start, batch.starts), cross_entropy(end, batch.ends)), 0.5)

    def nli_logits(self, batch: FinetuneBatch, rng=None, training: bool = False) -> Tensor:
        output = self._encode(batch, rng, training)
        return self.nli_classifier(cls_states(output.layer(self.placement.nsp_layer)))

    def nli_loss(self, batch: FinetuneBatch, rng=None, training: bool = False) -> Tensor:
        return cross_entropy(self.nli_logits(batch, rng, training), batch.labels)

    def loss(self, batch: FinetuneBatch, rng=None, training: bool = False) -> Tensor:
        return self.qa_loss(batch, rng, training) if self.task == "qa" else self.nli_loss(batch, rng, training)
