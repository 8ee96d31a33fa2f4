"""User/item/time embedding tables and sinusoidal position encodings."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import Rng
from .tensor import Tensor, take


@dataclass
class EmbeddingTables:
    users: Tensor
    items: Tensor
    times: Tensor  # last row is the PAD bucket
    d: int

    @property
    def buckets(self) -> int:
        return self.times.shape[0]


def init_tables(n_users: int, n_items: int, buckets: int, d: int, seed: int | Rng = 0) -> EmbeddingTables:
    if d < 2 or d % 2:
        raise ValueError("embedding dimension must be even and >= 2")
    if min(n_users, n_items) < 1 or buckets < 2:
        raise ValueError("table sizes must be positive (and at least one real time bucket)")
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    bound = 1.0 / math.sqrt(d)
    users = rng.uniform(-bound, bound, (n_users, d))
    items = rng.uniform(-bound, bound, (n_items, d))
    times = rng.uniform(-bound, bound, (buckets, d))
    times[-1] = 0.0
    return EmbeddingTables(Tensor(users, True, "emb.users"), Tensor(items, True, "emb.items"),
                           Tensor(times, True, "emb.times"), d)


def time_bucket(delta: float, buckets: int) -> int:
    """Exponential interval index: [0,1)->0, [1,2)->1, [2,4)->2, ...

    Clamped to ``buckets - 2``; ``buckets - 1`` is reserved for PAD.
    """
    if delta < 1:
        return 0
    if isinstance(delta, (int, np.integer)):
        b = int(delta).bit_length()
    else:
        b = math.frexp(delta)[1]
    return min(b, buckets - 2)


def time_buckets(delta: np.ndarray, buckets: int) -> np.ndarray:
    """Vectorised :func:`time_bucket` for float arrays."""
    delta = np.asarray(delta, dtype=np.float64)
    exp = np.frexp(np.maximum(delta, 1.0))[1]
    return np.where(delta < 1, 0, np.minimum(exp, buckets - 2)).astype(np.int64)


def pad_bucket(buckets: int) -> int:
    return buckets - 1


def time_embedding(tables: EmbeddingTables, delta: float | None) -> Tensor:
    b = pad_bucket(tables.buckets) if delta is None else time_bucket(delta, tables.buckets)
    return take(tables.times, np.asarray(b))


def positional_encoding(pos: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError("positional encoding needs an even dimension")
    i = np.arange(d // 2, dtype=np.float64)
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.empty(d)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


@lru_cache(maxsize=64)
def position_table(n: int, d: int) -> np.ndarray:
    """Rows 0..n of the encoding; row 0 is the PAD position."""
    table = np.stack([positional_encoding(p, d) for p in range(n + 1)])
    table.flags.writeable = False
    return table
