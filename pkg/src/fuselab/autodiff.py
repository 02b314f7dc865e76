"""Dense float64 tensors with reverse-mode differentiation.

Every operation records a vector-Jacobian closure on its output; ``backward``
walks the recorded graph once in reverse topological order and accumulates
gradients on every reachable tensor that requires them. There is no
broadcasting beyond bias-add and scalar-scale: shapes are explicit so each
backward rule stays small and checkable against finite differences.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericError, StateError

# GELU tanh approximation constants (fixed so tests can assert exact values).
GELU_COEF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715

LAYERNORM_EPS = 1e-5

# Additive mask value for disallowed attention logits. Large enough that
# exp(x - max) underflows to exactly 0.0 in float64.
NEG_MASK = -1e30


def _check_finite(arr: np.ndarray, op: str) -> None:
    # Cheap detector: the sum is NaN/Inf iff some element is (at desk scale
    # magnitudes cannot overflow the sum on their own).
    if not math.isfinite(float(arr.sum())):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        # asarray keeps 0-d shapes intact (ascontiguousarray would promote to 1-d)
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on.

        Repeated calls accumulate; ``zero_grad`` resets. Raises if the loss is
        not scalar or tracks no differentiable inputs.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise StateError("backward() on a tensor with no tracked inputs")

        order = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], op: str, vjp) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out.op = op
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise and structural kernels
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "add")
    return _from_op(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "sub")
    return _from_op(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "mul")
    return _from_op(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python-float constant."""
    s = float(s)
    return _from_op(x.data * s, (x,), "scale", lambda g: (g * s,))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a learnable scalar tensor (shape ())."""
    if s.data.shape != ():
        raise DimensionError(f"scale_by: scalar tensor required, got shape {s.shape}")
    sval = float(s.data)

    def vjp(g):
        return g * sval, np.asarray((g * x.data).sum())

    return _from_op(x.data * sval, (x, s), "scale_by", vjp)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add of a (d,) bias onto an (n, d) matrix."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise DimensionError(f"bias_add: got {x.shape} and {b.shape}")
    need_b = b.requires_grad
    return _from_op(x.data + b.data, (x, b), "bias_add",
                    lambda g: (g, g.sum(axis=0) if need_b else None))


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a fixed (non-differentiable) array, e.g. an attention mask."""
    return _from_op(x.data + c, (x,), "add_const", lambda g: (g,))


def negate(x: Tensor) -> Tensor:
    return _from_op(-x.data, (x,), "neg", lambda g: (-g,))


def tsum(x: Tensor) -> Tensor:
    return _from_op(np.asarray(x.data.sum()), (x,), "sum", lambda g: (np.full_like(x.data, float(g)),))


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    return _from_op(np.asarray(x.data.mean()), (x,), "mean", lambda g: (np.full_like(x.data, float(g) / n),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _from_op(t, (x,), "tanh", lambda g: (g * (1.0 - t * t),))


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation (constants pinned above)."""
    x2 = x.data * x.data
    t = np.tanh(GELU_COEF * x.data * (1.0 + GELU_CUBIC * x2))
    out = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _from_op(out, (x,), "gelu", vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    # Capture the requires flags so frozen-side products are never computed.
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g @ b.data.T if need_a else None,
                a.data.T @ g if need_b else None)

    return _from_op(a.data @ b.data, (a, b), "matmul", vjp)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: 2-D tensor required, got {x.shape}")
    return _from_op(np.ascontiguousarray(x.data.T), (x,), "transpose", lambda g: (g.T,))


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _from_op(s, (x,), "softmax", vjp)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last dimension; optional affine gain/bias of shape (d,).

    Constant rows map to exactly zero before the affine parameters (eps sits
    inside the square root).
    """
    if x.data.ndim != 2:
        raise DimensionError(f"layernorm: 2-D tensor required, got {x.shape}")
    d = x.data.shape[1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents: list[Tensor] = [x]
    out = xhat
    if gamma is not None:
        if gamma.data.shape != (d,):
            raise DimensionError(f"layernorm: gamma shape {gamma.shape} != ({d},)")
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        if beta.data.shape != (d,):
            raise DimensionError(f"layernorm: beta shape {beta.shape} != ({d},)")
        out = out + beta.data
        parents.append(beta)

    need_gamma = gamma is not None and gamma.requires_grad
    need_beta = beta is not None and beta.requires_grad

    def vjp(g):
        dxhat = g * gamma.data if gamma is not None else g
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=0) if need_gamma else None)
        if beta is not None:
            grads.append(g.sum(axis=0) if need_beta else None)
        return tuple(grads)

    return _from_op(out, tuple(parents), "layernorm", vjp)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup: out[i] = weight[ids[i]]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding: 1-D id array required, got shape {ids.shape}")
    vocab = weight.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: id outside [0, {vocab})")

    need_w = weight.requires_grad

    def vjp(g):
        if not need_w:
            return (None,)
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _from_op(weight.data[ids], (weight,), "embedding", vjp)


def concat_lastdim(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise DimensionError("concat_lastdim: empty input list")
    rows = tensors[0].data.shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[0] != rows:
            raise DimensionError(f"concat_lastdim: row mismatch {[t.shape for t in tensors]}")
    widths = [t.data.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _from_op(np.concatenate([t.data for t in tensors], axis=1),
                    tuple(tensors), "concat_lastdim", vjp)


def concat_tokendim(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise DimensionError("concat_tokendim: empty input list")
    cols = tensors[0].data.shape[1]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[1] != cols:
            raise DimensionError(f"concat_tokendim: column mismatch {[t.shape for t in tensors]}")
    heights = [t.data.shape[0] for t in tensors]
    splits = np.cumsum(heights)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=0))

    return _from_op(np.concatenate([t.data for t in tensors], axis=0),
                    tuple(tensors), "concat_tokendim", vjp)


def mean_tensors(tensors: list[Tensor]) -> Tensor:
    """Elementwise mean over a set of same-shape tensors."""
    if not tensors:
        raise DimensionError("mean_tensors: empty input list")
    for t in tensors[1:]:
        _require_same_shape(tensors[0], t, "mean_tensors")
    k = len(tensors)
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    return _from_op(acc / k, tuple(tensors), "mean_tensors",
                    lambda g: tuple(g / k for _ in range(k)))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.data.shape[0]):
        raise DimensionError(f"slice_rows: [{start}:{stop}] invalid for shape {x.shape}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _from_op(np.ascontiguousarray(x.data[start:stop]), (x,), "slice_rows", vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.data.shape[1]):
        raise DimensionError(f"slice_cols: [{start}:{stop}] invalid for shape {x.shape}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _from_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), "slice_cols", vjp)


def add_rows(x: Tensor, delta: Tensor, start: int) -> Tensor:
    """Add ``delta`` onto rows [start, start+len(delta)) of ``x``."""
    m = delta.data.shape[0]
    if x.data.ndim != 2 or delta.data.ndim != 2 or x.data.shape[1] != delta.data.shape[1]:
        raise DimensionError(f"add_rows: got {x.shape} and {delta.shape}")
    if not (0 <= start and start + m <= x.data.shape[0]):
        raise DimensionError(f"add_rows: rows [{start}:{start + m}] outside {x.shape}")
    out = x.data.copy()
    out[start : start + m] += delta.data

    def vjp(g):
        return g, np.ascontiguousarray(g[start : start + m])

    return _from_op(out, (x, delta), "add_rows", vjp)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over the rows selected by ``mask``.

    ``targets`` holds one class id per row; ``mask`` (bool per row) defaults
    to all rows. Ids outside the vocabulary raise IndexError.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.data.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy: target outside [0, {vocab})")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n,):
            raise DimensionError(f"cross_entropy: mask shape {mask.shape} != ({n},)")
    count = int(mask.sum())
    if count == 0:
        raise StateError("cross_entropy: no unmasked rows to score")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    nll = lse - logits.data[np.arange(n), targets]
    loss = np.asarray((nll * mask).sum() / count)

    def vjp(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(n), targets] -= 1.0
        probs *= (mask[:, None] * (float(g) / count))
        return (probs,)

    return _from_op(loss, (logits,), "cross_entropy", vjp)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def causal_mask(n: int) -> np.ndarray:
    """Additive mask disallowing attention to future positions."""
    return np.triu(np.full((n, n), NEG_MASK), k=1)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, causal: bool = False) -> Tensor:
    """Multi-head scaled dot-product attention as one fused kernel.

    q is (L_q, D); k and v are (L_k, D); D must divide evenly into heads and
    columns split into contiguous per-head blocks. With ``causal=True``
    (requires L_q == L_k) position i attends to j <= i.
    """
    from .errors import ConfigError

    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention: 2-D q/k/v required")
    d_model = q.data.shape[1]
    if k.data.shape[1] != d_model or v.data.shape[1] != d_model:
        raise DimensionError(f"attention: width mismatch {q.shape}/{k.shape}/{v.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise DimensionError(f"attention: key/value length mismatch {k.shape} vs {v.shape}")
    if d_model % n_heads != 0:
        raise ConfigError(f"attention: width {d_model} not divisible by {n_heads} heads")
    if causal and q.data.shape[0] != k.data.shape[0]:
        raise DimensionError("attention: causal masking requires L_q == L_k")

    l_q, l_k = q.data.shape[0], k.data.shape[0]
    d_head = d_model // n_heads
    inv_sqrt = 1.0 / math.sqrt(d_head)

    qh = np.ascontiguousarray(q.data.reshape(l_q, n_heads, d_head).transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.data.reshape(l_k, n_heads, d_head).transpose(1, 0, 2))
    vh = np.ascontiguousarray(v.data.reshape(l_k, n_heads, d_head).transpose(1, 0, 2))

    scores = (qh @ kh.transpose(0, 2, 1)) * inv_sqrt
    if causal:
        scores += causal_mask(l_q)[None, :, :]
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = (weights @ vh).transpose(1, 0, 2).reshape(l_q, d_model)

    need_q, need_k, need_v = q.requires_grad, k.requires_grad, v.requires_grad

    def vjp(g):
        gh = g.reshape(l_q, n_heads, d_head).transpose(1, 0, 2)
        d_weights = gh @ vh.transpose(0, 2, 1)
        d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True))
        d_scores *= inv_sqrt
        gq = gk = gv = None
        if need_q:
            gq = (d_scores @ kh).transpose(1, 0, 2).reshape(l_q, d_model)
        if need_k:
            gk = (d_scores.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(l_k, d_model)
        if need_v:
            gv = (weights.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(l_k, d_model)
        return gq, gk, gv

    return _from_op(out, (q, k, v), "attention", vjp)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class Parameter:
    """Named leaf tensor; ``trainable`` gates both the optimizer and autodiff."""

    __slots__ = ("name", "tensor", "_trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(data, requires_grad=trainable)
        self._trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.tensor.requires_grad = self._trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def size(self) -> int:
        return self.tensor.data.size

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.tensor.shape}, trainable={self._trainable})"


class ParamStore:
    """Flat registry of uniquely named parameters for one model."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise StateError(f"duplicate parameter name '{name}'")
        p = Parameter(name, data, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def matching(self, prefix: str) -> list[Parameter]:
        return [p for n, p in self._params.items() if n.startswith(prefix)]

    def total_size(self, prefix: str = "") -> int:
        return sum(p.size for p in self.matching(prefix))

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data for n, p in self._params.items()}
