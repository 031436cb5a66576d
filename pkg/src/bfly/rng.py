"""Seedable PRNG used by every stochastic operation in the package.

The generator is xoshiro256** seeded through splitmix64, fixed here so that
experiment outputs are bit-reproducible across runs and platforms.  All
sampling routines take an explicit `Rng` handle; nothing in the package
touches global random state.  Independent streams for parallel trials are
derived with `spawn`, which is deterministic in (seed, key).
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning (new_state, output)."""
    state = (state + _GOLDEN) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** stream with convenience samplers."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        s = self.seed
        state = []
        for _ in range(4):
            s, out = _splitmix64(s)
            state.append(out)
        self._s = state

    def u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def spawn(self, key: int) -> "Rng":
        """Derive an independent child stream; deterministic in (seed, key)."""
        _, mixed = _splitmix64((self.seed ^ ((key + 1) * _GOLDEN)) & _MASK)
        return Rng(mixed)

    def _raw(self, count: int) -> list[int]:
        # Hot path: keep the state transition in local variables.
        s0, s1, s2, s3 = self._s
        out = []
        append = out.append
        for _ in range(count):
            append((_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK)
            t = (s1 << 17) & _MASK
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self.u64() >> 11) * 2.0**-53

    def uniforms(self, count: int) -> np.ndarray:
        raw = np.array(self._raw(count), dtype=np.uint64)
        return ((raw >> np.uint64(11)).astype(np.float64)) * 2.0**-53

    def normals(self, count: int) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        pairs = (count + 1) // 2
        u = self.uniforms(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:count]

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def randint_below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection (no modulo bias)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            v = self.u64()
            if v < limit:
                return v % bound

    def rademacher(self, count: int) -> np.ndarray:
        """Array of independent +-1.0 signs."""
        raw = np.array(self._raw(count), dtype=np.uint64)
        return np.where((raw & np.uint64(1)).astype(bool), 1.0, -1.0)

    def subset(self, universe: int, size: int) -> np.ndarray:
        """Sorted uniform `size`-subset of range(universe), no replacement."""
        if not 0 <= size <= universe:
            raise ValueError("subset size out of range")
        pool = list(range(universe))
        for i in range(size):
            j = i + self.randint_below(universe - i)
            pool[i], pool[j] = pool[j], pool[i]
        return np.array(sorted(pool[:size]), dtype=np.int64)

    def permutation(self, count: int) -> np.ndarray:
        """Uniform permutation of range(count) (Fisher-Yates)."""
        perm = list(range(count))
        for i in range(count - 1, 0, -1):
            j = self.randint_below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def unit_vector(self, dim: int) -> np.ndarray:
        """Uniform point on the unit sphere in R^dim."""
        while True:
            v = self.normals(dim)
            norm = float(np.linalg.norm(v))
            if norm > 1e-12:
                return v / norm
