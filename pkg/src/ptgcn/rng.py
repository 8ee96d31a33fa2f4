"""Seedable SplitMix64 generator.

The update rule is the reference SplitMix64:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

All arithmetic is modulo 2**64. Because the i-th output only depends on
``state + i * GAMMA`` the generator is counter based, which lets us draw large
blocks with vectorised numpy code and still get the exact same stream as the
scalar recurrence on every platform.
"""
from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """Scalar finaliser; used for seeding and tag hashing."""
    z = x & MASK64
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31)


def _tag_hash(tag: str) -> int:
    # FNV-1a over utf-8 bytes, then mixed.
    h = 0xCBF29CE484222325
    for b in tag.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return splitmix64(h)


class Rng:
    """SplitMix64 stream.

    ``fork(tag)`` derives an independent sub-stream from the *seed* (not the
    current position), so toggling one consumer never shifts another.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        self.state = self.seed

    def fork(self, tag: str) -> "Rng":
        return Rng(splitmix64(self.seed ^ _tag_hash(tag)))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return splitmix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + np.uint64(GAMMA) * np.arange(1, n + 1, dtype=np.uint64)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MUL1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MUL2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + GAMMA * n) & MASK64
        return z

    def random(self, shape=None) -> np.ndarray | float:
        """Uniform doubles in [0, 1) with 53 random bits."""
        if shape is None:
            return (self.next_u64() >> 11) * 2.0**-53
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        return ((self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def integers(self, high: int, size: int | None = None):
        """Uniform integers in [0, high)."""
        if high <= 0:
            raise ValueError("high must be positive")
        if size is None:
            return min(int(self.random() * high), high - 1)
        return np.minimum((self.random(size) * high).astype(np.int64), high - 1)

    def choice(self, seq):
        return seq[self.integers(len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")
