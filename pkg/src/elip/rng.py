"""Deterministic RNG: SplitMix64 stream with Box-Muller Gaussians.

The generator is pinned bit-for-bit so that weights, datasets and subset
draws replay identically across platforms and language implementations.
Every draw convention below (53-bit uniforms, one Gaussian per pair of
uniforms, partial Fisher-Yates for sampling) is part of that contract.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_TWO53 = float(1 << 53)


class Rng:
    """SplitMix64 pseudo-random stream seeded with a u64."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) / _TWO53

    def gaussian(self) -> float:
        """Standard normal via Box-Muller; consumes exactly two uniforms.

        u1 is shifted into (0, 1] so the log is always finite; only the
        cosine branch is used (no pair caching).
        """
        u1 = ((self.next_u64() >> 11) + 1) / _TWO53
        u2 = (self.next_u64() >> 11) / _TWO53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def gaussian_matrix(self, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
        """(rows, cols) float64 matrix of scaled normals, row-major draw order."""
        out = np.empty((rows, cols), dtype=np.float64)
        flat = out.reshape(-1)
        for i in range(flat.size):
            flat[i] = self.gaussian() * scale
        return out

    def sample_without_replacement(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n) via partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.next_u64() % (n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
