"""Self-attention aggregator: K x (self-attention -> feed-forward), then attention pooling.

All functions accept arbitrary leading batch axes: entries are ``[..., n, d]``,
masks ``[..., n]`` booleans, queries ``[..., d]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tensor import (Tensor, dropout, layer_norm, masked_softmax, matmul, mul, relu,
                     reshape, sum_axis, sum_last, swapaxes, transpose)


@dataclass
class AggregatorLayer:
    w1: Tensor
    w2: Tensor
    gain: Tensor
    bias: Tensor


@dataclass
class AggregatorParams:
    layers: list[AggregatorLayer] = field(default_factory=list)
    heads: int = 1

    @property
    def K(self) -> int:
        return len(self.layers)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for k, layer in enumerate(self.layers):
            for name in ("w1", "w2", "gain", "bias"):
                out[f"agg.{k}.{name}"] = getattr(layer, name)
        return out


def init_aggregator(d: int, K: int, heads: int, rng: Rng) -> AggregatorParams:
    if heads < 1 or d % heads:
        raise ValueError("heads must divide the embedding dimension")
    bound = 1.0 / math.sqrt(d)
    layers = []
    for k in range(K):
        layers.append(AggregatorLayer(
            Tensor(rng.uniform(-bound, bound, (d, d)), True, f"agg.{k}.w1"),
            Tensor(rng.uniform(-bound, bound, (d, d)), True, f"agg.{k}.w2"),
            Tensor(np.ones(d), True, f"agg.{k}.gain"),
            Tensor(np.zeros(d), True, f"agg.{k}.bias"),
        ))
    return AggregatorParams(layers, heads)


def _mask_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    return mul(x, Tensor(mask[..., None].astype(np.float64)))


def seed_entries(entry_reps: Tensor, time_embs: Tensor | None, pos_encs: Tensor | np.ndarray | None,
                 mask=None) -> Tensor:
    """Row j = entry_j + time_j + position_j; PAD rows are zeroed when a mask is given."""
    c = entry_reps
    for extra in (time_embs, pos_encs):
        if extra is None:
            continue
        extra = extra if isinstance(extra, Tensor) else Tensor(extra)
        if extra.shape[-1] != c.shape[-1]:
            raise ValueError("entry, time and position vectors must share a dimension")
        c = c + extra
    if mask is not None:
        c = _mask_rows(c, np.asarray(mask, dtype=bool))
    return c


def self_attention_layer(c: Tensor, mask, heads: int = 1) -> Tensor:
    """Scaled dot-product self-attention without projections.

    With ``heads > 1`` each head attends within its own slice of the features.
    Rows of PAD entries come out as zeros.
    """
    mask = np.asarray(mask, dtype=bool)
    pair = mask[..., :, None] & mask[..., None, :]
    d = c.shape[-1]
    if heads == 1:
        logits = matmul(c, transpose(c)) * (1.0 / math.sqrt(d))
        return matmul(masked_softmax(logits, pair), c)
    n, dh = c.shape[-2], d // heads
    lead = c.shape[:-2]
    ch = swapaxes(reshape(c, lead + (n, heads, dh)), -2, -3)  # [..., H, n, dh]
    logits = matmul(ch, transpose(ch)) * (1.0 / math.sqrt(dh))
    out = matmul(masked_softmax(logits, pair[..., None, :, :]), ch)
    return reshape(swapaxes(out, -2, -3), lead + (n, d))


def feed_forward(c: Tensor, layer: AggregatorLayer, rate: float = 0.0, rng: Rng | None = None,
                 training: bool = False) -> Tensor:
    """LayerNorm(Dropout(ReLU(c W1) W2) + c), row-wise."""
    hidden = matmul(relu(matmul(c, layer.w1)), layer.w2)
    return layer_norm(dropout(hidden, rate, rng, training) + c, layer.gain, layer.bias)


def vanilla_attention_pool(s: Tensor, query: Tensor, mask) -> Tensor:
    """Attention-weighted sum of entry rows against ``query``; all-PAD gives zeros."""
    d = s.shape[-1]
    q = reshape(query, query.shape[:-1] + (1, d))
    logits = sum_last(mul(s, q)) * (1.0 / math.sqrt(d))
    alpha = masked_softmax(logits, mask)
    a = reshape(alpha, alpha.shape + (1,))
    return sum_axis(mul(a, s), -2)


def aggregate(entry_reps: Tensor, time_embs, pos_encs, mask, query: Tensor,
              params: AggregatorParams, rate: float = 0.0, rng: Rng | None = None,
              training: bool = False) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    c = seed_entries(entry_reps, time_embs, pos_encs, mask)
    for layer in params.layers:
        c = self_attention_layer(c, mask, params.heads)
        c = _mask_rows(feed_forward(c, layer, rate, rng, training), mask)
    return vanilla_attention_pool(c, query, mask)
