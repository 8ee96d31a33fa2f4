"""Time-aware graph convolution and its stacking over node flows.

The representation of a node at level 0 is its table row. At level ``l`` it is

    act(CONCAT(self^(l-1) W1, h^(l)) W2)

where ``h^(l)`` aggregates the level-(l-1) representations of the node's
latest neighbors (each taken at its own interaction time) enriched with time
and position encodings, and the attention query is ``self^(l-1)``.

:func:`embed_batch` first gathers every (kind, node, time) key required at
each level, deduplicating across the batch, then sweeps the levels bottom-up
with one vectorised aggregation per (level, kind).
"""
from __future__ import annotations

import numpy as np

from .aggregator import aggregate
from .encoders import position_table, time_buckets
from .graph import ITEM, USER, Neighborhood, TemporalBipartiteGraph, other_kind
from .model import ConvParams, ModelParams
from .rng import Rng
from .tensor import (Tensor, concat_last_dim, concat_rows, matmul, relu, reshape, take,
                     tanh)

Key = tuple[str, int, float]  # (kind, node, query time)


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return relu(x)
    if activation == "tanh":
        return tanh(x)
    return x


def conv_update(kind: str, prev_self: Tensor, h: Tensor, conv: ConvParams,
                activation: str = "relu") -> Tensor:
    """Combine a node's previous representation with its neighborhood aggregate."""
    if prev_self.shape != h.shape:
        raise ValueError(f"self {prev_self.shape} and aggregate {h.shape} must match")
    single = prev_self.ndim == 1
    if single:
        prev_self, h = reshape(prev_self, (1, -1)), reshape(h, (1, -1))
    w1, w2 = conv.pair(kind)
    out = _activate(matmul(concat_last_dim(matmul(prev_self, w1), h), w2), activation)
    return reshape(out, (out.shape[-1],)) if single else out


def gather_levels(params: ModelParams, g: TemporalBipartiteGraph, roots):
    """Keys needed per level and the neighborhoods convolved at each level."""
    cfg = params.config
    L = cfg.depth
    levels: list[dict[Key, None]] = [dict() for _ in range(L + 1)]
    nbs: list[dict[Key, Neighborhood]] = [dict() for _ in range(L + 1)]
    for node, kind, t in roots:
        g.history(kind, node)  # raises for unknown nodes
        levels[L].setdefault((kind, int(node), t))
    for l in range(L, 0, -1):
        width = cfg.widths[l - 1]
        below = levels[l - 1]
        for key in levels[l]:
            below.setdefault(key)
            kind, node, t = key
            if cfg.static_items and kind == ITEM:
                continue
            nb = g.neighborhood(kind, node, t, width)
            nbs[l][key] = nb
            okind = other_kind(kind)
            for e in nb.entries:
                if e is not None:
                    below.setdefault((okind, nb.endpoint(e), e.timestamp))
    return levels, nbs


def _convolve(params: ModelParams, keys: list[Key], nbs: dict[Key, Neighborhood], width: int,
              cur: dict, training: bool, rng: Rng | None) -> Tensor:
    cfg = params.config
    d = cfg.d
    kind = keys[0][0]
    okind = other_kind(kind)
    M = len(keys)
    ent_idx = np.zeros((M, width), dtype=np.int64)
    mask = np.zeros((M, width), dtype=bool)
    delta = np.zeros((M, width))
    pos = np.zeros((M, width), dtype=np.int64)
    opp_rows = cur[okind][1] if okind in cur else {}
    for i, key in enumerate(keys):
        nb = nbs[key]
        t_q = key[2]
        for j, e in enumerate(nb.entries):
            if e is None:
                continue
            mask[i, j] = True
            ent_idx[i, j] = opp_rows[(okind, nb.endpoint(e), e.timestamp)]
            delta[i, j] = t_q - e.timestamp
            pos[i, j] = e.position
    if mask.any():
        entries = take(cur[okind][0], ent_idx)
    else:
        entries = Tensor(np.zeros((M, width, d)))
    times = None
    if cfg.use_time:
        B = params.tables.buckets
        bucket = np.where(mask, time_buckets(delta / cfg.time_unit_seconds, B), B - 1)
        times = take(params.tables.times, bucket)
    positions = Tensor(position_table(width, d)[pos]) if cfg.use_pos else None
    self_t, self_rows = cur[kind]
    query = take(self_t, [self_rows[k] for k in keys])
    h = aggregate(entries, times, positions, mask, query, params.agg, cfg.dropout, rng, training)
    return conv_update(kind, query, h, params.conv, cfg.activation)


def embed_batch(params: ModelParams, g: TemporalBipartiteGraph, roots, *, training: bool = False,
                rng: Rng | None = None) -> Tensor:
    """Level-L embeddings for ``roots`` = [(node_id, kind, query_time), ...] -> [len(roots), d]."""
    roots = list(roots)
    if not roots:
        return Tensor(np.zeros((0, params.config.d)))
    if training and params.config.dropout > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    cfg = params.config
    levels, nbs = gather_levels(params, g, roots)

    cur: dict[str, tuple[Tensor, dict[Key, int]]] = {}
    for kind, table in ((USER, params.tables.users), (ITEM, params.tables.items)):
        keys = [k for k in levels[0] if k[0] == kind]
        if keys:
            cur[kind] = (take(table, [k[1] for k in keys]), {k: i for i, k in enumerate(keys)})

    for l in range(1, cfg.depth + 1):
        nxt = {}
        for kind in (USER, ITEM):
            keys = [k for k in levels[l] if k[0] == kind]
            if not keys:
                continue
            conv_keys = [k for k in keys if k in nbs[l]]
            pass_keys = [k for k in keys if k not in nbs[l]]
            parts, order = [], []
            if conv_keys:
                parts.append(_convolve(params, conv_keys, nbs[l], cfg.widths[l - 1], cur, training, rng))
                order += conv_keys
            if pass_keys:
                prev_t, prev_rows = cur[kind]
                parts.append(take(prev_t, [prev_rows[k] for k in pass_keys]))
                order += pass_keys
            out = parts[0] if len(parts) == 1 else concat_rows(parts)
            nxt[kind] = (out, {k: i for i, k in enumerate(order)})
        cur = nxt

    kinds = [k for k in (USER, ITEM) if k in cur]
    offset, rows, parts = 0, {}, []
    for kind in kinds:
        t, index = cur[kind]
        parts.append(t)
        for k, i in index.items():
            rows[k] = offset + i
        offset += t.shape[0]
    table = parts[0] if len(parts) == 1 else concat_rows(parts)
    return take(table, [rows[(kind, int(node), t)] for node, kind, t in roots])


def embed_node(params: ModelParams, g: TemporalBipartiteGraph, node_id: int, kind: str, t_q,
               *, training: bool = False, rng: Rng | None = None) -> Tensor:
    z = embed_batch(params, g, [(node_id, kind, t_q)], training=training, rng=rng)
    return reshape(z, (params.config.d,))
