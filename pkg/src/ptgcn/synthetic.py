"""Deterministic toy datasets with planted sequential, temporal or community structure."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import Interaction, InteractionLog, recompact
from .rng import Rng

DAY = 86400
KINDS = ("cyclic", "temporal_drift", "high_order")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "cyclic"
    n_users: int = 50
    n_items: int = 30
    per_user: int = 40
    seed: int = 0
    noise: float = 0.0
    # temporal_drift: number of alternating hot blocks / total windows
    epochs: int = 2
    windows: int = 40
    # high_order: community count and trend focus width
    communities: int = 2
    focus: int = 4
    # spacing of events (seconds per step / per window)
    step_seconds: int = DAY

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.n_users < 2 or self.n_items < 2 or self.per_user < 2:
            raise ValueError("user, item and per-user counts must be >= 2")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must be in [0, 1)")
        if self.kind == "temporal_drift" and (self.windows % self.epochs or self.n_items < self.epochs):
            raise ValueError("windows must be a multiple of epochs and items >= epochs")
        if self.kind == "high_order" and self.n_items < 2 * self.communities:
            raise ValueError("need at least two items per community")

    def describe(self) -> str:
        return " ".join(f"{k}={v}" for k, v in asdict(self).items())


def _log(records: list[Interaction], n_users: int, n_items: int) -> InteractionLog:
    return recompact(InteractionLog(records, n_users, n_items))


def gen_cyclic(spec: GeneratorSpec) -> InteractionLog:
    """Every user walks a shared item cycle; the next item is succ(previous).

    Users start at staggered offsets and step once per ``step_seconds``. A
    noisy step emits a random item and the walk continues from it.
    """
    rng = Rng(spec.seed).fork("cyclic")
    perm = rng.permutation(spec.n_items)
    succ = np.empty(spec.n_items, dtype=np.int64)
    succ[perm] = np.roll(perm, -1)
    recs = []
    for u in range(spec.n_users):
        cur = int(perm[(u * spec.n_items) // spec.n_users % spec.n_items])
        for k in range(spec.per_user):
            if k:
                cur = int(succ[cur])
            if spec.noise and rng.random() < spec.noise:
                cur = rng.integers(spec.n_items)
            recs.append(Interaction(u, cur, (k + 1) * spec.step_seconds))
    return _log(recs, spec.n_users, spec.n_items)


def _user_times(rng: Rng, spec: GeneratorSpec, horizon: int) -> list[int]:
    # each user is active over a random half of the horizon
    span = horizon // 2
    start = rng.integers(horizon - span + 1)
    return sorted(int(start + x) for x in rng.integers(span, spec.per_user))


def _pick_unseen(rng: Rng, options: list[int], seen: set[int], fallback: list[int]) -> int:
    fresh = [v for v in options if v not in seen]
    if not fresh:
        fresh = [v for v in fallback if v not in seen] or fallback
    return fresh[rng.integers(len(fresh))]


def drift_blocks(spec: GeneratorSpec) -> list[list[int]]:
    """Item blocks of the drift generator; block ``w % epochs`` is hot in window ``w``."""
    perm = Rng(spec.seed).fork("drift-blocks").permutation(spec.n_items)
    return [sorted(int(v) for v in part) for part in np.array_split(perm, spec.epochs)]


def gen_temporal_drift(spec: GeneratorSpec) -> InteractionLog:
    """Alternating hot item blocks.

    The horizon is cut into ``windows`` equal windows; in window ``w`` a draw
    comes from block ``w % epochs`` with probability ``1 - noise`` and is
    uniform over all items otherwise. Over the full horizon every block is hot
    for the same time, so global popularity carries no signal; users are
    sparse relative to the window length, so their own history says little
    about which block is currently hot.
    """
    rng = Rng(spec.seed).fork("drift")
    blocks = drift_blocks(spec)
    horizon = spec.windows * spec.step_seconds
    all_items = list(range(spec.n_items))
    recs = []
    for u in range(spec.n_users):
        seen: set[int] = set()
        for t in _user_times(rng, spec, horizon):
            w = t // spec.step_seconds
            if rng.random() < spec.noise:
                v = _pick_unseen(rng, all_items, seen, all_items)
            else:
                v = _pick_unseen(rng, blocks[w % spec.epochs], seen, all_items)
            seen.add(v)
            recs.append(Interaction(u, v, t))
    return _log(recs, spec.n_users, spec.n_items)


def community_of(spec: GeneratorSpec) -> tuple[np.ndarray, list[list[int]]]:
    """User community labels and each community's item pool."""
    users = np.arange(spec.n_users) % spec.communities
    perm = Rng(spec.seed).fork("pools").permutation(spec.n_items)
    pools = [[int(v) for v in part] for part in np.array_split(perm, spec.communities)]
    return users, pools


def gen_high_order(spec: GeneratorSpec) -> InteractionLog:
    """Communities with disjoint item pools and a moving trend inside each pool.

    At step ``s`` the trend of a community covers ``focus`` consecutive pool
    items starting at ``s mod |pool|``. Members consume from the trend, so the
    items a community touched recently, seen through other members, predict
    what a member takes next. ``noise`` draws uniformly over all items.
    """
    rng = Rng(spec.seed).fork("high-order")
    labels, pools = community_of(spec)
    horizon = spec.windows * spec.step_seconds
    all_items = list(range(spec.n_items))
    recs = []
    for u in range(spec.n_users):
        pool = pools[labels[u]]
        seen: set[int] = set()
        for t in _user_times(rng, spec, horizon):
            s = t // spec.step_seconds
            if spec.noise and rng.random() < spec.noise:
                v = _pick_unseen(rng, all_items, seen, all_items)
            else:
                trend = [pool[(s + j) % len(pool)] for j in range(spec.focus)]
                v = _pick_unseen(rng, trend, seen, pool)
            seen.add(v)
            recs.append(Interaction(u, v, t))
    return _log(recs, spec.n_users, spec.n_items)


def generate(spec: GeneratorSpec) -> InteractionLog:
    return {"cyclic": gen_cyclic, "temporal_drift": gen_temporal_drift,
            "high_order": gen_high_order}[spec.kind](spec)
