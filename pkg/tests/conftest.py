import numpy as np
import pytest

from ptgcn.graph import Interaction, InteractionLog
from ptgcn.tensor import Tape, backward


def random_log(seed: int, n_users: int, n_items: int, n: int, t_max: int = 100) -> InteractionLog:
    r = np.random.default_rng(seed)
    recs = [Interaction(int(r.integers(n_users)), int(r.integers(n_items)), int(r.integers(t_max)))
            for _ in range(n)]
    return InteractionLog(recs, n_users, n_items)


def fd_check(loss_fn, tensors: dict, coords: int = 20, h: float = 1e-5, seed: int = 0) -> dict:
    """Worst relative error per tensor between tape gradients and central differences.

    ``loss_fn()`` must rebuild the loss from the current tensor data.
    """
    for t in tensors.values():
        t.grad = None
    with Tape() as tape:
        out = loss_fn()
    backward(out, tape)
    r = np.random.default_rng(seed)
    worst = {}
    for name, t in tensors.items():
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        picks = r.choice(flat.size, size=min(coords, flat.size), replace=False)
        err = 0.0
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            down = float(loss_fn().data)
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = grad.reshape(-1)[i]
            err = max(err, abs(ana - num) / max(1e-8, abs(ana)))
        worst[name] = err
    return worst


@pytest.fixture
def nprng():
    return np.random.default_rng(12345)


CRITERIA = {
    "c01": "gradient correctness", "c02": "metric oracles", "c03": "time bucketing",
    "c04": "node-flow equivalence", "c05": "leakage freedom", "c06": "overfit sanity (cyclic)",
    "c07": "temporal-dynamics advantage", "c08": "high-order advantage",
    "c09": "determinism and persistence", "c10": "causality",
}


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance" not in rep.nodeid:
                continue
            tag = rep.nodeid.split("::test_")[-1][:3]
            detail = " ".join(f"{k}={v}" for k, v in rep.user_properties)
            lines.append((tag, f"{'PASS' if rep.passed else 'FAIL'}  {int(tag[1:]):>2}. "
                               f"{CRITERIA.get(tag, tag)}  [{detail}]"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
