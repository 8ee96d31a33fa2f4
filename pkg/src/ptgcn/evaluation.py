"""Top-k ranking metrics, ranking protocols and cold-start cohort reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .convolution import embed_batch
from .graph import ITEM, USER, Interaction, InteractionLog, TemporalBipartiteGraph
from .model import ModelParams
from .rng import Rng


@dataclass
class RankedList:
    user_id: int
    query_time: float
    item_ids: np.ndarray  # descending score, ties by ascending id
    scores: np.ndarray

    def rank_of(self, item: int) -> int | None:
        hit = np.flatnonzero(self.item_ids == item)
        return int(hit[0]) + 1 if hit.size else None


def order_items(items: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.lexsort((items, -scores))
    return items[idx], scores[idx]


class ModelRanker:
    """Scores every item for (user, time) queries with the trained model."""

    def __init__(self, params: ModelParams, max_roots: int = 4096):
        self.params = params
        self.max_roots = max_roots

    @property
    def n_items(self) -> int:
        return self.params.n_items

    def score_matrix(self, g: TemporalBipartiteGraph, queries: Sequence[tuple[int, float]]) -> np.ndarray:
        n_items = self.n_items
        d = self.params.config.d
        users = np.empty((len(queries), d))
        step = max(1, self.max_roots)
        for s in range(0, len(queries), step):
            chunk = queries[s:s + step]
            users[s:s + len(chunk)] = embed_batch(self.params, g, [(u, USER, t) for u, t in chunk]).data
        times = sorted({t for _, t in queries})
        per_time = max(1, self.max_roots // n_items)
        item_z: dict[float, np.ndarray] = {}
        for s in range(0, len(times), per_time):
            chunk = times[s:s + per_time]
            roots = [(v, ITEM, t) for t in chunk for v in range(n_items)]
            z = embed_batch(self.params, g, roots).data.reshape(len(chunk), n_items, d)
            for i, t in enumerate(chunk):
                item_z[t] = z[i]
        out = np.empty((len(queries), n_items))
        for q, (_, t) in enumerate(queries):
            out[q] = (item_z[t] * users[q]).sum(axis=-1)
        return out


class PopularityRanker:
    """Time-independent ranking by training interaction counts."""

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.float64)

    @property
    def n_items(self) -> int:
        return len(self.counts)

    def score_matrix(self, g, queries) -> np.ndarray:
        return np.tile(self.counts, (len(queries), 1))

    def top(self, k: int | None = None) -> list[int]:
        items, _ = order_items(np.arange(self.n_items), self.counts)
        return [int(i) for i in items[:k]]


def popularity_baseline(train_log: InteractionLog) -> PopularityRanker:
    counts = np.zeros(train_log.item_count)
    for r in train_log.records:
        counts[r.item_id] += 1
    return PopularityRanker(counts)


def _ranker(obj):
    return ModelRanker(obj) if isinstance(obj, ModelParams) else obj


def parse_protocol(protocol) -> tuple[str, int]:
    if isinstance(protocol, tuple):
        return protocol
    if protocol == "full":
        return ("full", 0)
    if protocol.startswith("sampled"):
        _, _, m = protocol.partition(":")
        return ("sampled", int(m or 100))
    raise ValueError(f"unknown protocol {protocol!r}")


def seen_items(g: TemporalBipartiteGraph, u: int, t) -> set[int]:
    """Items the user interacted with strictly before ``t``."""
    hist = g.history(USER, u)
    return {v for v, _ in hist[:g.count_before(USER, u, t)]}


def _candidates(g, u, t, n_items, protocol, truth, rng, exclude_seen) -> np.ndarray:
    kind, m = parse_protocol(protocol)
    seen = seen_items(g, u, t) if exclude_seen else set()
    if kind == "full":
        keep = np.ones(n_items, dtype=bool)
        if seen:
            keep[list(seen)] = False
        return np.flatnonzero(keep)
    if truth is None:
        raise ValueError("sampled protocol needs the true item")
    pool = [v for v in range(n_items) if v != truth and v not in seen]
    if rng is None:
        raise ValueError("sampled protocol needs an rng")
    if len(pool) > m:
        picks = rng.permutation(len(pool))[:m]
        pool = [pool[i] for i in sorted(picks)]
    return np.asarray([truth] + pool, dtype=np.int64)


def rank_items(ranker, g: TemporalBipartiteGraph, u: int, t, protocol="full", rng: Rng | None = None,
               truth: int | None = None, exclude_seen: bool = True) -> RankedList:
    ranker = _ranker(ranker)
    g.history(USER, u)
    scores = ranker.score_matrix(g, [(u, t)])[0]
    return _rank_from_scores(g, u, t, scores, protocol, rng, truth, exclude_seen)


def _rank_from_scores(g, u, t, scores, protocol, rng, truth, exclude_seen) -> RankedList:
    cand = _candidates(g, u, t, len(scores), protocol, truth, rng, exclude_seen)
    items, sc = order_items(cand, scores[cand])
    return RankedList(u, t, items, sc)


def rank_queries(ranker, g, queries: Sequence[Interaction], protocol="full", rng: Rng | None = None,
                 exclude_seen: bool = True, chunk: int = 512) -> list[RankedList]:
    ranker = _ranker(ranker)
    out = []
    for s in range(0, len(queries), chunk):
        part = queries[s:s + chunk]
        mat = ranker.score_matrix(g, [(q.user_id, q.timestamp) for q in part])
        for q, row in zip(part, mat):
            out.append(_rank_from_scores(g, q.user_id, q.timestamp, row, protocol, rng,
                                         q.item_id, exclude_seen))
    return out


def recall_at_k(ranked: RankedList, truth: int, k: int) -> float:
    """1 if the single relevant item is in the top k, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if truth in ranked.item_ids[:k] else 0.0


def ndcg_at_k(ranked: RankedList, truth: int, k: int) -> float:
    """1/log2(rank+1) inside the top k; the ideal DCG of one relevant item is 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rank = ranked.rank_of(truth)
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def _summarise(ranked: Sequence[RankedList], truths: Sequence[int], ks) -> dict:
    out: dict = {"count": len(ranked)}
    for k in ks:
        out[("recall", k)] = float(np.mean([recall_at_k(r, t, k) for r, t in zip(ranked, truths)]))
        out[("ndcg", k)] = float(np.mean([ndcg_at_k(r, t, k) for r, t in zip(ranked, truths)]))
    return out


def evaluate(ranker, g: TemporalBipartiteGraph, test: Sequence[Interaction], ks: Iterable[int] = (5, 10),
             protocol="full", rng: Rng | None = None, exclude_seen: bool = True) -> dict:
    """Mean Recall@k / NDCG@k over test interactions, keyed ``(metric, k)``."""
    test = list(test)
    if not test:
        raise ValueError("empty test set")
    ks = tuple(ks)
    if parse_protocol(protocol)[0] == "sampled" and rng is None:
        rng = Rng(0).fork("sampled-eval")
    ranked = rank_queries(ranker, g, test, protocol, rng, exclude_seen)
    return _summarise(ranked, [q.item_id for q in test], ks)


def cold_start_report(ranker, g: TemporalBipartiteGraph, test: Sequence[Interaction],
                      thresholds: Sequence[int], k: int = 10, protocol="full", rng: Rng | None = None,
                      exclude_seen: bool = True) -> list[dict]:
    """Metrics for users whose history before the test time is below each threshold.

    Groups are cumulative (``< 20`` includes ``< 10``). Empty groups report
    ``None`` metrics.
    """
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    test = list(test)
    if parse_protocol(protocol)[0] == "sampled" and rng is None:
        rng = Rng(0).fork("sampled-eval")
    ranked = rank_queries(ranker, g, test, protocol, rng, exclude_seen) if test else []
    hist = [g.count_before(USER, q.user_id, q.timestamp) for q in test]
    rows = []
    for th in thresholds:
        members = [i for i, h in enumerate(hist) if h < th]
        row = {"group": f"<{th}", "count": len(members), ("recall", k): None, ("ndcg", k): None}
        if members:
            s = _summarise([ranked[i] for i in members], [test[i].item_id for i in members], (k,))
            row.update(s)
        rows.append(row)
    return rows


def metric_rows(metrics: dict, group: str = "all") -> list[tuple[str, int, str, float | None, int]]:
    rows = []
    for key, value in metrics.items():
        if isinstance(key, tuple):
            rows.append((key[0], key[1], group, value, metrics.get("count", 0)))
    return sorted(rows, key=lambda r: (r[0], r[1]))


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "k", "group", "value", "count"])
        for m, k, grp, val, cnt in rows:
            w.writerow([m, k, grp, "" if val is None else f"{val:.6f}", cnt])


def format_table(rows) -> str:
    lines = [f"{'metric':<8} {'k':>3} {'group':<8} {'value':>9} {'count':>6}"]
    for m, k, grp, val, cnt in rows:
        v = "-" if val is None else f"{val:.4f}"
        lines.append(f"{m:<8} {k:>3} {grp:<8} {v:>9} {cnt:>6}")
    return "\n".join(lines)
