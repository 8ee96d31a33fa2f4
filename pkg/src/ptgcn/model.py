"""Trainable parameter registry for the whole model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .aggregator import AggregatorLayer, AggregatorParams, init_aggregator
from .config import ModelConfig
from .encoders import EmbeddingTables, init_tables
from .rng import Rng
from .tensor import Tensor


@dataclass
class ConvParams:
    w_u1: Tensor  # [d, d]
    w_v1: Tensor  # [d, d]
    w_u2: Tensor  # [2d, d]
    w_v2: Tensor  # [2d, d]

    def pair(self, kind: str) -> tuple[Tensor, Tensor]:
        return (self.w_u1, self.w_u2) if kind == "user" else (self.w_v1, self.w_v2)


def init_conv(d: int, rng: Rng) -> ConvParams:
    b1, b2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(2 * d)
    return ConvParams(
        Tensor(rng.uniform(-b1, b1, (d, d)), True, "conv.w_u1"),
        Tensor(rng.uniform(-b1, b1, (d, d)), True, "conv.w_v1"),
        Tensor(rng.uniform(-b2, b2, (2 * d, d)), True, "conv.w_u2"),
        Tensor(rng.uniform(-b2, b2, (2 * d, d)), True, "conv.w_v2"),
    )


@dataclass
class ModelParams:
    config: ModelConfig
    tables: EmbeddingTables
    conv: ConvParams
    agg: AggregatorParams

    @property
    def n_users(self) -> int:
        return self.tables.users.shape[0]

    @property
    def n_items(self) -> int:
        return self.tables.items.shape[0]

    def registry(self) -> dict[str, Tensor]:
        reg = {
            "emb.users": self.tables.users,
            "emb.items": self.tables.items,
            "emb.times": self.tables.times,
            "conv.w_u1": self.conv.w_u1,
            "conv.w_v1": self.conv.w_v1,
            "conv.w_u2": self.conv.w_u2,
            "conv.w_v2": self.conv.w_v2,
        }
        reg.update(self.agg.named())
        return reg

    def zero_grad(self) -> None:
        for t in self.registry().values():
            t.grad = None

    def shadow(self) -> "ModelParams":
        """Fresh leaf tensors over the same arrays (per-worker gradients)."""
        return self.rebuild({k: t.data for k, t in self.registry().items()}, copy=False)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.registry().items()}

    def rebuild(self, arrays: dict[str, np.ndarray], copy: bool = True) -> "ModelParams":
        return params_from_arrays(self.config, arrays, copy=copy)


def params_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray], copy: bool = True) -> ModelParams:
    def T(name):
        a = arrays[name]
        return Tensor(a.copy() if copy else a, True, name)

    tables = EmbeddingTables(T("emb.users"), T("emb.items"), T("emb.times"), config.d)
    conv = ConvParams(T("conv.w_u1"), T("conv.w_v1"), T("conv.w_u2"), T("conv.w_v2"))
    layers = [AggregatorLayer(T(f"agg.{k}.w1"), T(f"agg.{k}.w2"), T(f"agg.{k}.gain"), T(f"agg.{k}.bias"))
              for k in range(config.agg_layers)]
    return ModelParams(config, tables, conv, AggregatorParams(layers, config.heads))


def init_model(config: ModelConfig, n_users: int, n_items: int) -> ModelParams:
    root = Rng(config.seed).fork("init")
    tables = init_tables(n_users, n_items, config.time_buckets, config.d, root.fork("tables"))
    conv = init_conv(config.d, root.fork("conv"))
    agg = init_aggregator(config.d, config.agg_layers, config.heads, root.fork("agg"))
    return ModelParams(config, tables, conv, agg)
