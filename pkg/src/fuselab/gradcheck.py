"""Finite-difference oracle for verifying autodiff gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, Tensor
from .errors import DimensionError

DEFAULT_STEP = 1e-5


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_check(f, x: Tensor, h: float = DEFAULT_STEP) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps the tensor to a scalar Tensor and is re-evaluated with each
    coordinate of ``x`` nudged by +-h; the analytic gradient comes from one
    backward pass. The numeric path never touches the recorded graph.
    """
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise DimensionError(f"finite_diff_check: f must be scalar-valued, got {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x).item()
        flat[i] = orig - h
        f_minus = f(x).item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    return _rel_err(analytic, numeric)


def finite_diff_check_params(loss_fn, params: list[Parameter], h: float = DEFAULT_STEP) -> float:
    """Worst-case gradient error over every coordinate of several parameters.

    ``loss_fn`` takes no arguments and recomputes the scalar loss from current
    parameter values (the model holds the parameters by reference).
    """
    worst = 0.0
    for p in params:
        err = finite_diff_check(lambda _t: loss_fn(), p.tensor, h=h)
        worst = max(worst, err)
    return worst


def gradient_suite(trials_per_kernel: int = 3) -> dict[str, float]:
    """Max relative gradient error for every kernel, attention, the gated
    cross-attention block, and a sub-1k-parameter end-to-end fused model.

    Thresholds: kernels/attention/gated block < 1e-4, end-to-end < 1e-3.
    """
    from . import autodiff as ad
    from .encoder import EncoderConfig
    from .fusion import GatedCrossAttnBlock, LayerSet, make_plan
    from .lm import LMConfig
    from .model import FusedModel
    from .autodiff import ParamStore
    from .rng import Rng

    results: dict[str, float] = {}

    def kernel_cases(rng):
        d0, d1, d2 = (int(rng.integers(2, 8)) for _ in range(3))
        p01 = Tensor(rng.normal((d0, d1)))
        p02 = Tensor(rng.normal((d0, d2)))
        pcat = Tensor(rng.normal((d0, d1 + d2)))
        p2cat = Tensor(rng.normal((2 * d0, d1)))
        w = Tensor(rng.normal((d1, d2)))
        other = Tensor(rng.normal((d0, d1)))
        base = Tensor(rng.normal((d0, d1)))
        targets = rng.integers(0, d1, d0)
        gam = Tensor(1.0 + 0.1 * rng.normal(d1), requires_grad=True)
        bet = Tensor(0.1 * rng.normal(d1), requires_grad=True)
        return {
            "add": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.add(t, other), p01))),
            "sub": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.sub(t, other), p01))),
            "mul": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.mul(t, other), p01))),
            "scale": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.scale(t, 1.7), p01))),
            "matmul": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.matmul(t, w), p02))),
            "softmax": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.softmax_lastdim(t), p01))),
            "layernorm": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.layernorm(t, gam, bet), p01))),
            "gelu": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.gelu(t), p01))),
            "tanh": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.tanh(t), p01))),
            "bias_add": ((d1,), lambda t: ad.tsum(ad.mul(ad.bias_add(base, t), p01))),
            "concat_lastdim": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.concat_lastdim([t, p02]), pcat))),
            "concat_tokendim": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.concat_tokendim([t, other]), p2cat))),
            "mean_tensors": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.mean_tensors([t, other]), p01))),
            "cross_entropy": ((d0, d1), lambda t: ad.cross_entropy(t, targets)),
            "embedding": ((d2, d1), lambda t: ad.tsum(ad.mul(ad.embedding(t, targets % d2), p01))),
            "add_rows": ((d0, d1), lambda t: ad.tsum(ad.mul(ad.add_rows(ad.concat_tokendim([t, other]), t, d0 // 2), p2cat))),
            "slice": ((d0, d1 + d2), lambda t: ad.tsum(ad.mul(ad.slice_cols(t, 0, d1), p01))),
            "mean": ((d0, d1), lambda t: ad.tmean(ad.mul(t, t))),
        }

    worst_kernel = 0.0
    for trial in range(trials_per_kernel):
        rng = Rng(2024 + trial)
        for name, (shape, f) in kernel_cases(rng).items():
            x = Tensor(rng.normal(shape), requires_grad=True)
            err = finite_diff_check(f, x)
            results[f"kernel:{name}"] = max(results.get(f"kernel:{name}", 0.0), err)
            worst_kernel = max(worst_kernel, err)
    results["kernels"] = worst_kernel

    rng = Rng(77)
    q = Tensor(rng.normal((3, 8)), requires_grad=True)
    k = Tensor(rng.normal((3, 8)), requires_grad=True)
    v = Tensor(rng.normal((3, 8)), requires_grad=True)
    probe = Tensor(rng.normal((3, 8)))
    worst_attn = 0.0
    for causal in (False, True):
        for t in (q, k, v):
            f = lambda _: ad.tsum(ad.mul(ad.attention(q, k, v, 2, causal=causal), probe))
            worst_attn = max(worst_attn, finite_diff_check(f, t))
    results["attention"] = worst_attn

    store = ParamStore()
    block = GatedCrossAttnBlock(store, "gx", dim=8, heads=2, rng=rng, gate_init=0.2)
    h = Tensor(rng.normal((4, 8)))
    ctx = Tensor(rng.normal((3, 8)))
    bprobe = Tensor(rng.normal((4, 8)))
    worst_block = 0.0
    for p in store:
        f = lambda _: ad.tsum(ad.mul(block.branch(h, ctx), bprobe))
        worst_block = max(worst_block, finite_diff_check(f, p.tensor))
    results["gated_block"] = worst_block

    enc_cfg = EncoderConfig(image_size=8, patch_size=4, depth=2, width=4, heads=1,
                            mlp_ratio=1, channels=1)
    lm_cfg = LMConfig(depth=1, hidden=8, heads=2, vocab_size=6, max_seq=12, mlp_ratio=1)
    model = FusedModel(enc_cfg, lm_cfg,
                       make_plan("internal", "direct", LayerSet("Custom", (2,))),
                       seed=0)
    model.set_stage(2)
    params = model.trainable_params()
    assert sum(p.size for p in params) <= 1000
    img = Rng(12).uniform((1, 8, 8))
    results["end_to_end_params"] = float(sum(p.size for p in params))
    results["end_to_end"] = finite_diff_check_params(
        lambda: model.loss(img, [1, 3], [4, 2]), params)
    return results


def gradient_suite_passed(results: dict[str, float]) -> bool:
    return (results["kernels"] < 1e-4 and results["attention"] < 1e-4
            and results["gated_block"] < 1e-4 and results["end_to_end"] < 1e-3)
