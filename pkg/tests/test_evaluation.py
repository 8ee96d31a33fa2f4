import math

import numpy as np
import pytest

from ptgcn.config import ModelConfig
from ptgcn.evaluation import (ModelRanker, PopularityRanker, RankedList, cold_start_report, evaluate,
                              metric_rows, ndcg_at_k, popularity_baseline, rank_items, recall_at_k,
                              write_metrics_csv)
from ptgcn.graph import Interaction, InteractionLog, build_graph
from ptgcn.model import init_model
from ptgcn.rng import Rng

from conftest import random_log
from oracles import metric_ndcg, metric_recall


class Fixed:
    """Ranker returning a preset score matrix row per user."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    @property
    def n_items(self):
        return self.table.shape[1]

    def score_matrix(self, g, queries):
        return np.stack([self.table[u] for u, _ in queries])


def ranked(items):
    return RankedList(0, 0, np.asarray(items), np.zeros(len(items)))


def test_metric_examples():
    r = ranked([7, 1, 2, 3, 4, 5, 6])
    assert recall_at_k(r, 7, 5) == 1
    assert recall_at_k(r, 5, 5) == 0
    assert ndcg_at_k(r, 7, 10) == 1
    assert ndcg_at_k(r, 2, 10) == 0.5
    assert ndcg_at_k(r, 99, 10) == 0
    with pytest.raises(ValueError):
        recall_at_k(r, 7, 0)


def test_metrics_match_formula_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        items = rng.permutation(n)
        truth = int(rng.integers(n + 3))
        k = int(rng.integers(1, n + 5))
        r = ranked(items)
        assert abs(recall_at_k(r, truth, k) - metric_recall(items, truth, k)) <= 1e-12
        assert abs(ndcg_at_k(r, truth, k) - metric_ndcg(items, truth, k)) <= 1e-12


def test_rank_items_order_and_ties():
    g = build_graph(InteractionLog([Interaction(0, 2, 5)], 1, 4))
    out = rank_items(Fixed([[1.0, 0.5, 9.0, 0.5]]), g, 0, 3)
    assert out.item_ids.tolist() == [2, 0, 1, 3]
    out = rank_items(Fixed([[1.0, 0.5, 9.0, 0.5]]), g, 0, 6)
    assert out.item_ids.tolist() == [0, 1, 3]  # item 2 seen before t=6
    out = rank_items(Fixed([[1.0, 0.5, 9.0, 0.5]]), g, 0, 6, exclude_seen=False)
    assert out.item_ids.tolist() == [2, 0, 1, 3]


def test_model_ranking_matches_brute_force():
    log = random_log(3, 5, 30, 80)
    g = build_graph(log)
    p = init_model(ModelConfig(d=8, depth=1, widths=(3,), agg_layers=1), 5, 30)
    from ptgcn.convolution import embed_node
    from ptgcn.graph import ITEM, USER
    for u, t in ((0, 50), (3, 10), (4, 200)):
        zu = embed_node(p, g, u, USER, t).data
        scores = [float(np.dot(zu, embed_node(p, g, v, ITEM, t).data)) for v in range(30)]
        seen = {r.item_id for r in log.records if r.user_id == u and r.timestamp < t}
        want = sorted((v for v in range(30) if v not in seen), key=lambda v: (-scores[v], v))
        got = rank_items(p, g, u, t)
        assert got.item_ids.tolist() == want


def test_evaluate_oracle_and_random_scores():
    n_users, n_items = 1000, 100
    g = build_graph(InteractionLog([], n_users, n_items))
    truth = [Interaction(u, u % n_items, 1) for u in range(n_users)]
    perfect = np.zeros((n_users, n_items))
    perfect[np.arange(n_users), np.arange(n_users) % n_items] = 1
    m = evaluate(Fixed(perfect), g, truth, ks=(1, 5, 10))
    assert all(m[(x, k)] == 1 for x in ("recall", "ndcg") for k in (1, 5, 10))
    noise = np.random.default_rng(0).random((n_users, n_items))
    m = evaluate(Fixed(noise), g, truth, ks=(5, 10))
    assert abs(m[("recall", 10)] - 0.1) < 0.03
    assert m[("recall", 5)] <= m[("recall", 10)] and m[("ndcg", 5)] <= m[("ndcg", 10)]
    with pytest.raises(ValueError):
        evaluate(Fixed(noise), g, [])


def test_sampled_protocol():
    g = build_graph(InteractionLog([Interaction(0, 0, 1)], 1, 300))
    r = rank_items(Fixed([np.arange(300.0)]), g, 0, 5, "sampled:100", Rng(0), truth=7)
    assert len(r.item_ids) == 101 and 7 in r.item_ids and 0 not in r.item_ids


def test_cold_start_groups():
    recs = []
    for u, n in enumerate([3, 12, 25, 60]):
        recs += [Interaction(u, i % 5, i) for i in range(n)]
    log = InteractionLog(recs, 4, 5)
    g = build_graph(log)
    test = [Interaction(u, 0, 1000) for u in range(4)]
    rows = cold_start_report(Fixed(np.ones((4, 5))), g, test, [5, 15, 30, 50], exclude_seen=False)
    assert [r["count"] for r in rows] == [1, 2, 3, 3]
    hist = [3, 12, 25, 60]
    assert [r["count"] for r in rows] == [sum(h < th for h in hist) for th in (5, 15, 30, 50)]
    rows = cold_start_report(Fixed(np.ones((4, 5))), g, test, [1, 2, 3])
    assert all(r["count"] == 0 and r[("recall", 10)] is None for r in rows)
    assert len(cold_start_report(Fixed(np.ones((4, 5))), g, test, [15, 20, 25, 30])) == 4


def test_popularity():
    log = InteractionLog([Interaction(0, 0, 1), Interaction(1, 0, 2), Interaction(0, 0, 3),
                          Interaction(1, 1, 4)], 2, 3)
    pop = popularity_baseline(log)
    assert pop.top() == [0, 1, 2]
    assert PopularityRanker(np.array([2.0, 2.0, 1.0])).top(2) == [0, 1]
    assert pop.top(1)[0] == int(np.argmax(np.bincount([r.item_id for r in log.records])))


def test_metrics_csv(tmp_path):
    rows = metric_rows({("recall", 5): 0.5, ("ndcg", 5): 0.25, "count": 4})
    p = tmp_path / "m.csv"
    write_metrics_csv(p, rows + [("recall", 10, "<20", None, 0)])
    lines = p.read_text().splitlines()
    assert lines[0] == "metric,k,group,value,count"
    assert "ndcg,5,all,0.250000,4" in lines and "recall,10,<20,,0" in lines
