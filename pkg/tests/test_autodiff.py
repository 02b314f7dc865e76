import numpy as np
import pytest

from fuselab import autodiff as ad
from fuselab.autodiff import Tensor
from fuselab.errors import ConfigError, DimensionError, NumericError, StateError
from fuselab.gradcheck import finite_diff_check
from fuselab.rng import Rng


def rand_tensor(rng, shape, requires_grad=True):
    return Tensor(rng.normal(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(ad.matmul(eye, b).data, b.data)


def test_matmul_hand_arithmetic():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    assert ad.matmul(a, b).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_backward_vs_finite_differences():
    rng = Rng(7)
    a = rand_tensor(rng, (3, 4))
    b = rand_tensor(rng, (4, 2))
    assert finite_diff_check(lambda t: ad.tsum(ad.matmul(t, b)), a) < 1e-4
    assert finite_diff_check(lambda t: ad.tsum(ad.matmul(a, t)), b) < 1e-4


def test_matmul_backward_closed_form():
    rng = Rng(11)
    a = rand_tensor(rng, (3, 4))
    b = rand_tensor(rng, (4, 2))
    g = rng.normal((3, 2))
    out = ad.matmul(a, b)
    loss = ad.tsum(ad.mul(out, Tensor(g)))
    loss.backward()
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


# ---------------------------------------------------------------------------
# core kernels
# ---------------------------------------------------------------------------


def test_softmax_symmetry():
    out = ad.softmax_lastdim(Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])


def test_softmax_rows_sum_to_one():
    rng = Rng(3)
    for trial in range(20):
        x = rand_tensor(rng, (5, 7), requires_grad=False)
        s = ad.softmax_lastdim(x).data
        assert np.all(np.abs(s.sum(axis=1) - 1.0) < 1e-12)


def test_layernorm_constant_rows_map_to_zero():
    out = ad.layernorm(Tensor([[4.0, 4.0, 4.0, 4.0]]))
    assert np.allclose(out.data, 0.0)


def test_mean_over_set():
    out = ad.mean_tensors([Tensor([[2.0]]), Tensor([[4.0]])])
    assert out.data.tolist() == [[3.0]]


def test_gelu_known_point():
    # gelu(0) == 0 and gelu is odd-ish around 0: gelu(x) + gelu(-x) == x - x == 0 at 0
    assert ad.gelu(Tensor([[0.0]])).data.tolist() == [[0.0]]


def test_embedding_lookup_and_out_of_range():
    w = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = ad.embedding(w, [1, 3])
    assert np.array_equal(out.data, w.data[[1, 3]])
    with pytest.raises(IndexError):
        ad.embedding(w, [4])


def test_embedding_backward_scatters_duplicates():
    w = Tensor(np.zeros((3, 2)), requires_grad=True)
    out = ad.embedding(w, [1, 1, 2])
    ad.tsum(out).backward()
    assert np.array_equal(w.grad, [[0, 0], [2, 2], [1, 1]])


def test_concat_and_slice_roundtrip():
    rng = Rng(5)
    a = rand_tensor(rng, (3, 2))
    b = rand_tensor(rng, (3, 4))
    cat = ad.concat_lastdim([a, b])
    assert cat.shape == (3, 6)
    back = ad.slice_cols(cat, 2, 6)
    assert np.array_equal(back.data, b.data)
    rows = ad.concat_tokendim([a, a])
    assert rows.shape == (6, 2)
    assert np.array_equal(ad.slice_rows(rows, 3, 6).data, a.data)


def test_add_rows_forward_and_grads():
    x = Tensor(np.zeros((4, 2)), requires_grad=True)
    d = Tensor(np.ones((2, 2)), requires_grad=True)
    out = ad.add_rows(x, d, 1)
    assert np.array_equal(out.data, [[0, 0], [1, 1], [1, 1], [0, 0]])
    ad.tsum(out).backward()
    assert np.array_equal(x.grad, np.ones((4, 2)))
    assert np.array_equal(d.grad, np.ones((2, 2)))


def test_cross_entropy_target_out_of_vocab():
    logits = Tensor(np.zeros((2, 4)), requires_grad=True)
    with pytest.raises(IndexError):
        ad.cross_entropy(logits, [0, 4])


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 4)), requires_grad=True)
    loss = ad.cross_entropy(logits, [0, 3])
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_nonfinite_forward_raises():
    big = Tensor([[1e308, 1e308]])
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        ad.add(big, big)


@pytest.mark.parametrize(
    "name,kernel,shape",
    [
        ("softmax", ad.softmax_lastdim, (4, 5)),
        ("layernorm", ad.layernorm, (3, 6)),
        ("gelu", ad.gelu, (3, 4)),
        ("tanh", ad.tanh, (2, 3)),
    ],
)
def test_kernel_gradients(name, kernel, shape):
    rng = Rng(sum(map(ord, name)))
    probe = Tensor(rng.normal(shape))
    x = rand_tensor(rng, shape)
    f = lambda t: ad.tsum(ad.mul(kernel(t), probe))
    assert finite_diff_check(f, x) < 1e-4, name


def test_bias_add_gradient():
    rng = Rng(61)
    base = Tensor(rng.normal((4, 3)))
    probe = Tensor(rng.normal((4, 3)))
    b = rand_tensor(rng, (3,))
    f = lambda t: ad.tsum(ad.mul(ad.bias_add(base, t), probe))
    assert finite_diff_check(f, b) < 1e-4


def test_layernorm_affine_gradients():
    rng = Rng(91)
    x = rand_tensor(rng, (3, 5))
    gamma = Tensor(1.0 + rng.normal(5) * 0.1, requires_grad=True)
    beta = Tensor(rng.normal(5) * 0.1, requires_grad=True)
    probe = Tensor(rng.normal((3, 5)))

    def f(_):
        return ad.tsum(ad.mul(ad.layernorm(x, gamma, beta), probe))

    assert finite_diff_check(f, x) < 1e-4
    assert finite_diff_check(f, gamma) < 1e-4
    assert finite_diff_check(f, beta) < 1e-4


def test_cross_entropy_gradient_with_mask():
    rng = Rng(17)
    logits = rand_tensor(rng, (5, 6))
    targets = [1, 0, 5, 2, 3]
    mask = [True, False, True, True, False]
    f = lambda t: ad.cross_entropy(t, targets, mask)
    assert finite_diff_check(f, logits) < 1e-4


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_attention_single_token_returns_value_row():
    q = Tensor([[1.0, 2.0, 3.0, 4.0]])
    v = Tensor([[9.0, 8.0, 7.0, 6.0]])
    out = ad.attention(q, q, v, n_heads=1)
    assert np.array_equal(out.data, v.data)


def test_attention_causal_first_row_is_v0():
    rng = Rng(23)
    q = rand_tensor(rng, (2, 4), requires_grad=False)
    k = rand_tensor(rng, (2, 4), requires_grad=False)
    v = rand_tensor(rng, (2, 4), requires_grad=False)
    out = ad.attention(q, k, v, n_heads=1, causal=True)
    assert np.allclose(out.data[0], v.data[0])


def test_attention_head_divisibility():
    q = Tensor(np.zeros((2, 6)))
    with pytest.raises(ConfigError):
        ad.attention(q, q, q, n_heads=4)


def test_attention_gradients_all_inputs():
    rng = Rng(29)
    q = rand_tensor(rng, (3, 8))
    k = rand_tensor(rng, (3, 8))
    v = rand_tensor(rng, (3, 8))
    probe = Tensor(rng.normal((3, 8)))
    for t in (q, k, v):
        f = lambda _: ad.tsum(ad.mul(ad.attention(q, k, v, n_heads=2, causal=False), probe))
        assert finite_diff_check(f, t) < 1e-4


def test_attention_output_in_convex_hull_of_values():
    rng = Rng(31)
    for trial in range(10):
        q = rand_tensor(rng, (4, 6), requires_grad=False)
        k = rand_tensor(rng, (5, 6), requires_grad=False)
        v = rand_tensor(rng, (5, 6), requires_grad=False)
        out = ad.attention(q, k, v, n_heads=1).data
        lo = v.data.min(axis=0) - 1e-12
        hi = v.data.max(axis=0) + 1e-12
        assert np.all(out >= lo) and np.all(out <= hi)


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_elementwise_product():
    rng = Rng(37)
    x = rand_tensor(rng, (3, 3))
    y = rand_tensor(rng, (3, 3))
    ad.tsum(ad.mul(x, y)).backward()
    assert np.array_equal(x.grad, y.data)
    assert np.array_equal(y.grad, x.data)


def test_backward_non_scalar_raises():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(DimensionError):
        ad.add(x, x).backward()


def test_backward_accumulates_exactly_then_clears():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = Tensor(np.full((2, 2), 3.0), requires_grad=True)
    loss = ad.tsum(ad.mul(x, y))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    assert np.array_equal(x.grad, 2.0 * first)
    x.zero_grad()
    assert x.grad is None
    loss.backward()
    assert np.array_equal(x.grad, first)


def test_backward_frozen_leaves_untouched():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    frozen = Tensor(np.ones((2, 2)), requires_grad=False)
    ad.tsum(ad.mul(x, frozen)).backward()
    assert frozen.grad is None
    assert x.grad is not None


def test_backward_diamond_graph_counts_paths():
    x = Tensor(np.array([[2.0]]), requires_grad=True)
    y = ad.add(x, x)
    ad.tsum(ad.mul(y, y)).backward()
    # d/dx (2x)^2 = 8x = 16
    assert x.grad.tolist() == [[16.0]]


def test_scale_by_scalar_parameter():
    rng = Rng(41)
    x = rand_tensor(rng, (3, 2))
    s = Tensor(np.asarray(0.7), requires_grad=True)
    probe = Tensor(rng.normal((3, 2)))
    f = lambda _: ad.tsum(ad.mul(ad.scale_by(x, s), probe))
    assert finite_diff_check(f, s) < 1e-4
    assert finite_diff_check(f, x) < 1e-4


# ---------------------------------------------------------------------------
# spec invariants: 100 seeded trials over every registered kernel
# ---------------------------------------------------------------------------

def _kernel_cases(rng):
    """Fixed-probe closures over every registered kernel, dims <= 8."""
    d0 = int(rng.integers(2, 8))
    d1 = int(rng.integers(2, 8))
    d2 = int(rng.integers(2, 8))
    p01 = Tensor(rng.normal((d0, d1)))
    p02 = Tensor(rng.normal((d0, d2)))
    pcat = Tensor(rng.normal((d0, d1 + d2)))
    w12 = Tensor(rng.normal((d1, d2)))
    other = Tensor(rng.normal((d0, d1)))
    base = Tensor(rng.normal((d0, d1)))
    targets = rng.integers(0, d1, d0)
    cases = [
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.softmax_lastdim(t), p01))),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.layernorm(t), p01))),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.gelu(t), p01))),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.tanh(t), p01))),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.matmul(t, w12), p02))),
        ((d0, d1), lambda t: ad.cross_entropy(t, targets)),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.add(t, other), p01))),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.scale(t, 1.7), p01))),
        ((d1,), lambda t: ad.tsum(ad.mul(ad.bias_add(base, t), p01))),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.concat_lastdim([t, p02]), pcat))),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.mean_tensors([t, other]), p01))),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.sub(t, other), p01))),
        ((d0, d1), lambda t: ad.tsum(ad.mul(ad.concat_tokendim([t, other]), Tensor(np.concatenate([p01.data, p01.data]))))),
    ]
    return cases


def test_kernel_gradient_sweep_100_trials():
    for trial in range(100):
        rng = Rng(1000 + trial)
        cases = _kernel_cases(rng)
        shape, f = cases[trial % len(cases)]
        x = Tensor(rng.normal(shape), requires_grad=True)
        err = finite_diff_check(f, x, h=1e-5)
        assert err < 1e-4, f"trial {trial} err {err}"


def test_determinism_same_seed_bitwise():
    def run(seed):
        rng = Rng(seed)
        x = Tensor(rng.normal((4, 4)), requires_grad=True)
        w = Tensor(rng.normal((4, 4)), requires_grad=True)
        out = ad.tsum(ad.gelu(ad.matmul(x, w)))
        out.backward()
        return out.data.tobytes(), x.grad.tobytes()

    assert run(99) == run(99)
