"""Seeded xorshift-family random number generator.

The generator is a counter-based splitmix64: output i is the xorshift-multiply
mix of ``seed + (i+1) * GOLDEN``. Being counter-based makes it trivially
vectorizable with uint64 numpy arithmetic and bit-identical across platforms,
and ``split`` derives independent child streams from string labels so that
parallel experiment runs cannot perturb each other.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1E4ECE5D)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_U64 = np.uint64
_TWO53_INV = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def _fnv1a(label: str) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in label.encode("utf-8"):
            h = (h ^ _U64(b)) * _FNV_PRIME
    return h


class Rng:
    """Deterministic stream of floats/ints derived from a 64-bit seed."""

    def __init__(self, seed: int):
        self._seed = _U64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def split(self, label: str) -> "Rng":
        """Derive an independent child stream keyed by ``label``."""
        child_seed = _mix64(np.array([self._seed ^ _fnv1a(label)], dtype=np.uint64))[0]
        return Rng(int(child_seed))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix64(self._seed + idx * _GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        vals = (self._raw(n) >> _U64(11)).astype(np.float64) * _TWO53_INV
        return vals.reshape(shape) if shape else vals[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        span = high - low
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        vals = low + (self._raw(n) % _U64(span)).astype(np.int64)
        return vals.reshape(shape) if shape else int(vals[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - (self._raw(m) >> _U64(11)).astype(np.float64) * _TWO53_INV  # (0, 1]
        u2 = (self._raw(m) >> _U64(11)).astype(np.float64) * _TWO53_INV
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        vals = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return vals.reshape(shape) if shape else vals[0]

    def truncated_normal(self, shape, std: float = 0.02) -> np.ndarray:
        """Normals truncated to two standard deviations, then scaled by ``std``."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        filled = 0
        while filled < n:
            cand = self.normal(n - filled)
            cand = np.atleast_1d(cand)
            keep = cand[np.abs(cand) <= 2.0]
            take = min(len(keep), n - filled)
            out[filled : filled + take] = keep[:take]
            filled += take
        return (std * out).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n)."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from range({n})")
        return self.permutation(n)[:k]
