"""Counter-based random streams.

Every random draw in the package comes from SplitMix64 used in counter
mode: the ``c``-th 64-bit word of the stream with key ``k`` is

    mix64((k + (c + 1) * 0x9E3779B97F4A7C15) mod 2**64)

which is exactly the ``c``-th output of a SplitMix64 generator seeded with
``k``.  Sub-streams are keyed by hashing the parent key together with a
tuple of labels (see :func:`derive_key`), so any draw can be recomputed
from ``(root seed, labels, counter)`` alone, independent of scheduling or
of the language used to re-implement it.
"""

from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def word(key: int, counter: int) -> int:
    """Return the 64-bit word at ``counter`` of the stream keyed by ``key``."""
    return mix64(key + (counter + 1) * GOLDEN)


def derive_key(parent: int, *labels) -> int:
    """Derive a child stream key.

    The key is the first 8 bytes (little-endian) of
    ``sha256("<parent>|<label1>|<label2>|...")`` with each label rendered
    by ``str``.
    """
    text = "|".join([str(int(parent) & MASK64)] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode("ascii")).digest()[:8], "little")


class Stream:
    """Sequential view over one counter-based stream."""

    def __init__(self, key: int, counter: int = 0):
        self.key = int(key) & MASK64
        self.counter = counter

    @classmethod
    def derive(cls, parent: int, *labels) -> "Stream":
        return cls(derive_key(parent, *labels))

    def child(self, *labels) -> "Stream":
        return Stream(derive_key(self.key, *labels))

    def next_u64(self) -> int:
        out = word(self.key, self.counter)
        self.counter += 1
        return out

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits of one word."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + self.below(hi - lo + 1)

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def normal(self, mean: float = 0.0, sd: float = 1.0) -> float:
        # Box-Muller, cosine branch only; consumes two words
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return mean + sd * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def weighted_index(self, weights: Sequence[float]) -> int:
        total = float(sum(weights))
        if total <= 0:
            raise ValueError("weights must have positive sum")
        target = self.uniform() * total
        acc = 0.0
        last = 0
        for i, w in enumerate(weights):
            if w <= 0:
                continue
            acc += w
            last = i
            if target < acc:
                return i
        return last

    def choice(self, items: Sequence):
        return items[self.below(len(items))]

    def shuffle(self, items: list) -> list:
        """Fisher-Yates in place (descending i, j uniform in [0, i])."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample(self, items: Sequence, k: int) -> list:
        """k distinct items by partial Fisher-Yates (ascending i)."""
        pool = list(items)
        if k > len(pool):
            raise ValueError("sample larger than population")
        for i in range(k):
            j = i + self.below(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def words(key: int, counters: np.ndarray) -> np.ndarray:
    """Vectorised :func:`word` over an array of counters."""
    with np.errstate(over="ignore"):
        z = np.uint64(key & MASK64) + (counters.astype(np.uint64) + np.uint64(1)) * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))


def uniforms(key: int, counters: np.ndarray) -> np.ndarray:
    return (words(key, counters) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def normals(key: int, index: np.ndarray) -> np.ndarray:
    """Standard normals keyed by element index; element i uses words 2i and 2i+1.

    Matches :meth:`Stream.normal` drawn from ``Stream(key, counter=2 * i)``.
    """
    index = index.astype(np.uint64)
    u1 = 1.0 - uniforms(key, index * np.uint64(2))
    u2 = uniforms(key, index * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
