"""
BERT-style post-norm transformer encoder that keeps every layer's output.

Task heads read from `EncoderOutput.layer(k)` (1-based), which is how the
hierarchical placements are expressed.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from hierbert.exceptions import DimensionError, TokenLookupError
from hierbert.layers import LayerNorm, Linear, Module, parameter
from hierbert.tensor import (
    Tensor, add, dropout, gather_rows, gelu, mask_fill, matmul, permute, reshape, scale, softmax,
)

logger = logging.getLogger(__name__)


class EncoderConfig(BaseModel):
    """Desk-scale defaults; a base-size model is num_layers=12, hidden_size=768"""

    num_layers: int = Field(4, ge=1)
    num_heads: int = Field(4, ge=1)
    hidden_size: int = Field(64, ge=1)
    ff_size: int = Field(128, ge=1)
    max_position: int = Field(384, ge=1)
    vocab_size: int = Field(2048, ge=6)
    type_vocab: int = Field(2, ge=2, le=2)
    dropout_p: float = Field(0.1, ge=0.0, lt=1.0)
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    @model_validator(mode="after")
    def heads_divide_hidden(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads


@dataclass
class EncoderOutput:
    per_layer: List[Tensor]
    embedding_output: Tensor

    def layer(self, k: int) -> Tensor:
        """Output of encoder layer k, 1-based"""
        if not 1 <= k <= len(self.per_layer):
            raise IndexError(f"layer {k} outside 1..{len(self.per_layer)}")
        return self.per_layer[k - 1]

    @property
    def last(self) -> Tensor:
        return self.per_layer[-1]


class Embeddings(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        h, std = config.hidden_size, config.init_std
        self.token = parameter(rng.normal(0.0, std, size=(config.vocab_size, h)))
        self.position = parameter(rng.normal(0.0, std, size=(config.max_position, h)))
        self.segment = parameter(rng.normal(0.0, std, size=(config.type_vocab, h)))
        self.norm = LayerNorm(h, config.layer_norm_eps)


class EncoderLayer(Module):
    """Self-attention then feed-forward, each followed by residual + layer norm"""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        h, std = config.hidden_size, config.init_std
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.dropout_p = config.dropout_p
        self.query = Linear(h, h, rng, std=std)
        # no key bias: softmax is invariant to it
        self.key = Linear(h, h, rng, bias=False, std=std)
        self.value = Linear(h, h, rng, std=std)
        self.attn_out = Linear(h, h, rng, std=std)
        self.attn_norm = LayerNorm(h, config.layer_norm_eps)
        self.ff_in = Linear(h, config.ff_size, rng, std=std)
        self.ff_out = Linear(config.ff_size, h, rng, std=std)
        self.ff_norm = LayerNorm(h, config.layer_norm_eps)
        self.last_attention: Optional[np.ndarray] = None

    def __call__(self, x: Tensor, keep: np.ndarray, rng: Optional[np.random.Generator],
                 training: bool) -> Tensor:
        b, s, h = x.shape
        nh, hd = self.num_heads, self.head_dim
        q = permute(reshape(self.query(x), (b, s, nh, hd)), (0, 2, 1, 3))
        k_t = permute(reshape(self.key(x), (b, s, nh, hd)), (0, 2, 3, 1))
        v = permute(reshape(self.value(x), (b, s, nh, hd)), (0, 2, 1, 3))

        scores = scale(matmul(q, k_t), 1.0 / np.sqrt(hd))
        scores = mask_fill(scores, keep[:, None, None, :])
        probs = softmax(scores, axis=-1)
        self.last_attention = probs.data
        probs = dropout(probs, self.dropout_p, training, rng)

        context = reshape(permute(matmul(probs, v), (0, 2, 1, 3)), (b, s, h))
        attended = dropout(self.attn_out(context), self.dropout_p, training, rng)
        x = self.attn_norm(add(x, attended))

        ff = self.ff_out(gelu(self.ff_in(x)))
        ff = dropout(ff, self.dropout_p, training, rng)
        return self.ff_norm(add(x, ff))


class Encoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.embeddings = Embeddings(config, rng)
        self.layers = [EncoderLayer(config, rng) for _ in range(config.num_layers)]

    def embed(self, token_ids, segment_ids, rng: Optional[np.random.Generator] = None,
              training: bool = False) -> Tensor:
        """
        Token + position + segment embeddings, then layer norm and dropout.

        Accepts one sequence [seq] (returns [seq×hidden]) or a batch [batch×seq]
        (returns [batch×seq×hidden]).
        """
        tokens = np.asarray(token_ids, dtype=np.int64)
        segments = np.asarray(segment_ids, dtype=np.int64)
        if tokens.shape != segments.shape:
            raise DimensionError("embed", tokens.shape, segments.shape)
        single = tokens.ndim == 1
        if single:
            tokens, segments = tokens[None, :], segments[None, :]
        b, s = tokens.shape
        if s > self.config.max_position:
            raise TokenLookupError("position embeddings", s - 1, self.config.max_position)
        hidden = self.config.hidden_size
        emb = self.embeddings

        positions = np.tile(np.arange(s), b)
        summed = add(
            add(gather_rows(emb.token, tokens.reshape(-1), table="token embeddings"),
                gather_rows(emb.position, positions, table="position embeddings")),
            gather_rows(emb.segment, segments.reshape(-1), table="segment embeddings"),
        )
        x = emb.norm(reshape(summed, (b, s, hidden)))
        x = dropout(x, self.config.dropout_p, training, rng)
        return reshape(x, (s, hidden)) if single else x

    def encode(self, embedded: Tensor, attention_mask, rng: Optional[np.random.Generator] = None,
               training: bool = False, num_layers: Optional[int] = None) -> EncoderOutput:
        """
        Run the layer stack; per_layer[k] is the output of layer k+1.

        `attention_mask` is True at real tokens. Padding keys are excluded from
        every query's softmax. `num_layers` stops early when no head reads higher.
        """
        keep = np.asarray(attention_mask, dtype=bool)
        single = embedded.ndim == 2
        x = reshape(embedded, (1,) + embedded.shape) if single else embedded
        if keep.ndim == 1:
            keep = keep[None, :]
        if keep.shape != x.shape[:2]:
            raise DimensionError("encode", x.shape, keep.shape)

        per_layer = []
        for layer in self.layers[:num_layers or len(self.layers)]:
            x = layer(x, keep, rng, training)
            per_layer.append(reshape(x, x.shape[1:]) if single else x)
        return EncoderOutput(per_layer=per_layer, embedding_output=embedded)

    def forward(self, token_ids, segment_ids, attention_mask, rng=None, training=False) -> EncoderOutput:
        return self.encode(self.embed(token_ids, segment_ids, rng, training), attention_mask, rng, training)
