"""Reusable parameterized layers built on the autodiff kernels.

All weights initialize to truncated normal (std 0.02) and all biases, norm
offsets, and gates to zero; norm gains start at one.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .rng import Rng


class Linear:
    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_out: int,
                 rng: Rng, zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else rng.truncated_normal((d_in, d_out))
        self.w = store.add(f"{prefix}.w", w)
        self.b = store.add(f"{prefix}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.bias_add(ad.matmul(x, self.w.tensor), self.b.tensor)

    @staticmethod
    def param_count(d_in: int, d_out: int) -> int:
        return d_in * d_out + d_out


class LayerNorm:
    def __init__(self, store: ParamStore, prefix: str, dim: int):
        self.gamma = store.add(f"{prefix}.gamma", np.ones(dim))
        self.beta = store.add(f"{prefix}.beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma.tensor, self.beta.tensor)

    @staticmethod
    def param_count(dim: int) -> int:
        return 2 * dim


class Mlp:
    """Two-layer feed-forward with GELU."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, hidden: int, rng: Rng):
        self.fc1 = Linear(store, f"{prefix}.fc1", dim, hidden, rng)
        self.fc2 = Linear(store, f"{prefix}.fc2", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    @staticmethod
    def param_count(dim: int, hidden: int) -> int:
        return Linear.param_count(dim, hidden) + Linear.param_count(hidden, dim)


class SelfAttention:
    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int, rng: Rng):
        self.heads = heads
        self.wq = Linear(store, f"{prefix}.wq", dim, dim, rng)
        self.wk = Linear(store, f"{prefix}.wk", dim, dim, rng)
        self.wv = Linear(store, f"{prefix}.wv", dim, dim, rng)
        self.wo = Linear(store, f"{prefix}.wo", dim, dim, rng)

    def __call__(self, x: Tensor, causal: bool) -> Tensor:
        out = ad.attention(self.wq(x), self.wk(x), self.wv(x), self.heads, causal=causal)
        return self.wo(out)


class TransformerBlock:
    """Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(x))."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int,
                 mlp_ratio: int, rng: Rng):
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", dim)
        self.attn = SelfAttention(store, f"{prefix}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", dim)
        self.mlp = Mlp(store, f"{prefix}.mlp", dim, dim * mlp_ratio, rng)

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x), causal=causal))
        return ad.add(x, self.mlp(self.ln2(x)))
