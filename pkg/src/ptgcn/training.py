"""Negative sampling, training instances, BCE loss, Adam and the training loop."""
from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from bisect import bisect_right

import numpy as np

from .config import ModelConfig
from .convolution import embed_batch
from .graph import (ITEM, USER, InteractionLog, NodeFlow, TemporalBipartiteGraph, build_graph,
                    build_node_flow, last_per_user)
from .model import ModelParams, init_model, params_from_arrays
from .rng import Rng
from .tensor import (Tape, Tensor, add, backward, clamp, log, mul, scale, sigmoid, sum_all,
                     sum_last, take)

log_ = logging.getLogger(__name__)

__all__ = [
    "ModelParams", "TrainingInstance", "AdamState", "NoNegativeError", "negative_sample",
    "build_instances", "score", "loss", "adam_step", "train", "TrainResult",
    "save_checkpoint", "load_checkpoint",
]


class NoNegativeError(ValueError):
    pass


def _seen_before(g: TemporalBipartiteGraph, u: int, t) -> set[int]:
    hist = g.history(USER, u)
    end = bisect_right(g.times(USER, u), t)
    return {v for v, _ in hist[:end]}


def negative_sample(g: TemporalBipartiteGraph, u: int, t, rng: Rng) -> int:
    """Uniform over items the user has not interacted with at or before ``t``."""
    seen = _seen_before(g, u, t)
    if len(seen) >= g.item_count:
        raise NoNegativeError(f"user {u} has interacted with every item by t={t}")
    if len(seen) > g.item_count // 2:
        pool = [v for v in range(g.item_count) if v not in seen]
        return pool[rng.integers(len(pool))]
    while True:
        v = rng.integers(g.item_count)
        if v not in seen:
            return v


def _draw_negative(g: TemporalBipartiteGraph, u: int, pos: int, t, rng: Rng) -> int:
    try:
        return negative_sample(g, u, t, rng)
    except NoNegativeError:
        # catalogue exhausted (repeat consumption): fall back to any other item
        if g.item_count < 2:
            raise
        v = rng.integers(g.item_count - 1)
        return v + (v >= pos)


@dataclass(eq=False)
class TrainingInstance:
    """One labelled interaction with its sampled negative.

    The three node flows are built lazily; training itself embeds through
    :func:`embed_batch`, which gathers the same neighborhoods.
    """
    user: int
    pos_item: int
    neg_item: int
    label_time: int
    graph: TemporalBipartiteGraph = field(repr=False)
    depth: int = 1
    widths: tuple[int, ...] = (1,)

    def _flow(self, node: int, kind: str) -> NodeFlow:
        return build_node_flow(self.graph, node, kind, self.label_time, self.depth, self.widths)

    @cached_property
    def user_flow(self) -> NodeFlow:
        return self._flow(self.user, USER)

    @cached_property
    def pos_item_flow(self) -> NodeFlow:
        return self._flow(self.pos_item, ITEM)

    @cached_property
    def neg_item_flow(self) -> NodeFlow:
        return self._flow(self.neg_item, ITEM)


def build_instances(g: TemporalBipartiteGraph, log: InteractionLog, config: ModelConfig,
                    rng: Rng) -> list[TrainingInstance]:
    """One instance per interaction, in log order."""
    depth = max(config.depth, 1)
    widths = tuple(config.widths) if config.depth else (1,)
    out = []
    for r in log.records:
        neg = _draw_negative(g, r.user_id, r.item_id, r.timestamp, rng)
        out.append(TrainingInstance(r.user_id, r.item_id, neg, r.timestamp, g, depth, widths))
    return out


def score(z_u: Tensor, z_v: Tensor) -> Tensor:
    """Inner-product preference; works row-wise on batches."""
    return sum_last(mul(z_u, z_v))


def loss(pos_scores: Tensor, neg_scores: Tensor, registry: dict[str, Tensor] | None = None,
         lam: float = 0.0) -> Tensor:
    """Summed binary cross-entropy plus ``lam`` times the squared Frobenius norms."""
    if np.isnan(pos_scores.data).any() or np.isnan(neg_scores.data).any():
        raise ValueError("NaN score")
    eps = 1e-12
    p = clamp(sigmoid(pos_scores), eps, 1 - eps)
    q = clamp(add(scale(sigmoid(neg_scores), -1.0), Tensor(1.0)), eps, 1 - eps)
    total = scale(add(sum_all(log(p)), sum_all(log(q))), -1.0)
    if lam and registry:
        reg = None
        for t in registry.values():
            sq = sum_all(mul(t, t))
            reg = sq if reg is None else add(reg, sq)
        total = add(total, scale(reg, lam))
    return total


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(registry: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update using each tensor's ``.grad``, in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in registry.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -------------------------------------------------------------------- loop

def batch_loss(params: ModelParams, g: TemporalBipartiteGraph, batch, *, training: bool,
               rng: Rng | None, lam: float | None = None) -> tuple[Tensor, float]:
    """Loss of a list of (user, pos, neg, t); returns (total, bce part)."""
    roots = [(u, USER, t) for u, _, _, t in batch]
    roots += [(p, ITEM, t) for _, p, _, t in batch]
    roots += [(n, ITEM, t) for _, _, n, t in batch]
    z = embed_batch(params, g, roots, training=training, rng=rng)
    b = len(batch)
    zu = take(z, np.arange(b))
    zp = take(z, np.arange(b, 2 * b))
    zn = take(z, np.arange(2 * b, 3 * b))
    lam = params.config.lam if lam is None else lam
    registry = params.registry()
    total = loss(score(zu, zp), score(zu, zn), registry, lam)
    penalty = lam * sum(float((t.data * t.data).sum()) for t in registry.values()) if lam else 0.0
    return total, float(total.data) - penalty


def _worker_grads(params: ModelParams, g, chunk, rng: Rng, lam: float):
    shadow = params.shadow()
    with Tape() as tape:
        total, bce = batch_loss(shadow, g, chunk, training=True, rng=rng, lam=lam)
    backward(total, tape)
    return {k: t.grad for k, t in shadow.registry().items()}, bce, float(total.data)


def train_step(params: ModelParams, g: TemporalBipartiteGraph, batch, state: AdamState,
               rng: Rng, workers: int = 1, pool: ThreadPoolExecutor | None = None) -> tuple[float, float]:
    """Forward/backward over one mini-batch then a single Adam step."""
    registry = params.registry()
    params.zero_grad()
    if workers <= 1 or len(batch) < 2:
        with Tape() as tape:
            total, bce = batch_loss(params, g, batch, training=True, rng=rng)
        backward(total, tape)
        tot = float(total.data)
    else:
        # regulariser counted once, on the first chunk
        size = math.ceil(len(batch) / workers)
        chunks = [batch[i:i + size] for i in range(0, len(batch), size)]
        rngs = [rng.fork(f"worker{i}:{rng.next_u64()}") for i in range(len(chunks))]
        lams = [params.config.lam] + [0.0] * (len(chunks) - 1)
        results = list(pool.map(lambda a: _worker_grads(params, g, *a), zip(chunks, rngs, lams)))
        bce = tot = 0.0
        for grads, b, t in results:
            bce += b
            tot += t
            for k, gr in grads.items():
                if gr is None:
                    continue
                p = registry[k]
                p.grad = gr.copy() if p.grad is None else p.grad + gr
    adam_step(registry, state)
    return tot, bce


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int | None
    adam: AdamState


def train(config: ModelConfig, train_log: InteractionLog, valid=None, *, callback=None,
          stop_when=None) -> TrainResult:
    """Mini-batch Adam training with per-epoch validation NDCG@10 early stopping.

    ``valid`` is a list of held-out interactions (or a log, reduced to each
    user's last interaction). ``callback(epoch, params, row)`` may add entries
    to the history row; ``stop_when(row)`` ends training early when true.
    """
    from .evaluation import ModelRanker, evaluate

    if not train_log.records:
        raise ValueError("empty training log")
    g = build_graph(train_log)
    params = init_model(config, train_log.user_count, train_log.item_count)
    root = Rng(config.seed)
    neg_rng, shuf_rng, drop_rng = root.fork("negatives"), root.fork("shuffle"), root.fork("dropout")
    state = AdamState(lr=config.lr)
    if isinstance(valid, InteractionLog):
        valid = last_per_user(valid.records)
    history: list[dict] = []
    best, best_epoch, best_state, stale = -math.inf, None, None, 0
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            instances = build_instances(g, train_log, config, neg_rng)
            order = shuf_rng.permutation(len(instances))
            tot_sum = bce_sum = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = [(instances[i].user, instances[i].pos_item, instances[i].neg_item,
                          instances[i].label_time) for i in idx]
                tot, bce = train_step(params, g, batch, state, drop_rng, config.workers, pool)
                tot_sum += tot
                bce_sum += bce
            n = len(instances)
            row = {"epoch": epoch, "loss": bce_sum / n, "objective": tot_sum / n}
            if valid:
                m = evaluate(ModelRanker(params), g, valid, ks=(10,))
                row["valid_recall@10"] = m[("recall", 10)]
                row["valid_ndcg@10"] = m[("ndcg", 10)]
            if callback is not None:
                callback(epoch, params, row)
            history.append(row)
            log_.info("epoch %d loss %.5f %s", epoch, row["loss"],
                      f"ndcg@10 {row['valid_ndcg@10']:.4f}" if valid else "")
            if valid:
                if row["valid_ndcg@10"] > best:
                    best, best_epoch, stale = row["valid_ndcg@10"], epoch, 0
                    best_state = params.snapshot()
                else:
                    stale += 1
                    if stale >= config.patience:
                        break
            if stop_when is not None and stop_when(row):
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if best_state is not None:
        params = params_from_arrays(config, best_state)
    return TrainResult(params, history, best_epoch, state)


# -------------------------------------------------------------- checkpoints

MAGIC = b"PTGC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, state: AdamState | None, path: str | Path,
                    extra: dict | None = None) -> None:
    """``PTGC`` | u32 version | u64 header length | JSON header | float64 LE payloads."""
    arrays = {k: t.data for k, t in params.registry().items()}
    if state is not None:
        for k in state.m:
            arrays[f"adam.m.{k}"] = state.m[k]
            arrays[f"adam.v.{k}"] = state.v[k]
    entries, offset = [], 0
    for name, a in arrays.items():
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = {
        "config": params.config.to_dict(),
        "tensors": entries,
        "payload_bytes": offset,
        "adam": None if state is None else {
            "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "step": state.step},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, expect: ModelParams | None = None):
    """Returns (params, adam_state_or_None, header).

    ``expect`` optionally checks the tensor registry against an existing model.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    if len(raw) < 16 + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as e:
        raise CheckpointTruncatedError(f"{path}: unreadable header ({e})") from None
    body = raw[16 + hlen:]
    if len(body) != header["payload_bytes"]:
        raise CheckpointTruncatedError(f"{path}: payload has {len(body)} bytes, "
                                       f"expected {header['payload_bytes']}")
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]) \
            .reshape(e["shape"]).astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    model_names = [k for k in arrays if not k.startswith("adam.")]
    if expect is not None:
        want = list(expect.registry())
        if sorted(want) != sorted(model_names):
            raise CheckpointNameError(f"{path}: tensor names differ from the model registry")
    try:
        params = params_from_arrays(config, arrays)
    except KeyError as e:
        raise CheckpointNameError(f"{path}: missing tensor {e}") from None
    if sorted(params.registry()) != sorted(model_names):
        raise CheckpointNameError(f"{path}: unexpected tensors in checkpoint")
    state = None
    if header.get("adam"):
        a = header["adam"]
        state = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"])
        for k in model_names:
            if f"adam.m.{k}" in arrays:
                state.m[k] = arrays[f"adam.m.{k}"]
                state.v[k] = arrays[f"adam.v.{k}"]
    return params, state, header
