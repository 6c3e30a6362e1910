"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive is a pair of functions: a forward that maps numpy arrays to
an output array plus a saved context, and a backward rule that maps the
output adjoint to one adjoint per input.  Backward rules live in the
``BACKWARD_RULES`` table and are looked up when ``backward`` runs, so a rule
can be swapped out (the gradient-check mutation test relies on this).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf from its inputs."""

    def __init__(self, op: str, where: str | None = None):
        self.op = op
        self.where = where
        msg = f"non-finite value produced by op '{op}'"
        if where:
            msg += f" ({where})"
        super().__init__(msg)


class GradCheckError(ArithmeticError):
    """Analytic or numeric gradient is non-finite at a coordinate."""

    def __init__(self, param: str, index: tuple, kind: str):
        self.param = param
        self.index = tuple(int(i) for i in index)
        self.kind = kind
        super().__init__(f"{kind} gradient is non-finite for {param}{list(self.index)}")


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _finite_check() -> bool:
    return getattr(_state, "finite", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (thread-local)."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = _finite_check()
    _state.finite = enabled
    try:
        yield
    finally:
        _state.finite = prev


class Tensor:
    """A graph node: forward value, optional parents and accumulated adjoint."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        raise TypeError("use numerics.slice_axis/take_rows; arbitrary indexing is not differentiable here")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(op: str, out: np.ndarray, parents: tuple[Tensor, ...], ctx) -> Tensor:
    if _finite_check():
        # any NaN/Inf entry makes the sum non-finite
        tot = float(out.sum())
        if tot - tot != 0.0:
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.op = op
        t.parents = parents
        t.ctx = ctx
    else:
        t.requires_grad = False
        t.op = None
        t.parents = ()
        t.ctx = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class _Scatter:
    """Adjoint that is zero except on ``shape[key]``; accumulated in place."""

    __slots__ = ("shape", "key", "value")

    def __init__(self, shape, key, value):
        self.shape = shape
        self.key = key
        self.value = value

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=DTYPE)
        out[self.key] = self.value
        return out


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), (a.shape, b.shape))


def _add_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), (a.shape, b.shape))


def _sub_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), (a.data, b.data))


def _mul_bw(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b), (a.data, b.data, out))


def _div_bw(ctx, g):
    a, b, out = ctx
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), None)


def _neg_bw(ctx, g):
    return (-g,)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    return _make("scale", a.data * c, (a,), c)


def _scale_bw(ctx, g):
    return (g * ctx,)


def matmul(a, b) -> Tensor:
    """(..., k) @ (k, m); the right operand is always 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make("matmul", a.data @ b.data, (a, b), (a.data, b.data))


def _matmul_bw(ctx, g):
    a, b = ctx
    ga = g @ b.T
    if a.ndim == 1:
        gb = np.outer(a, g)
    else:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return ga, gb


def linear(x, W, b) -> Tensor:
    """x @ W + b with a row-broadcast bias."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape} do not conform")
    return _make("linear", x.data @ W.data + b.data, (x, W, b), (x.data, W.data))


def _linear_bw(ctx, g):
    x, W = ctx
    g2 = g.reshape(-1, g.shape[-1])
    return g @ W.T, x.reshape(-1, x.shape[-1]).T @ g2, g2.sum(axis=0)


def matmul_t(a, b) -> Tensor:
    """a @ b.T for 2-D operands (pairwise inner products)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_t: shapes {a.shape} and {b.shape} do not conform")
    return _make("matmul_t", a.data @ b.data.T, (a, b), (a.data, b.data))


def _matmul_t_bw(ctx, g):
    a, b = ctx
    return g @ b, g.T @ a


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise ShapeError("concat: no operands")
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs:
        if x.ndim != nd or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    return _make("concat", np.concatenate([x.data for x in xs], axis=ax), xs, (ax, sizes))


def _concat_bw(ctx, g):
    ax, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes {[x.shape for x in xs]} differ")
    return _make("stack", np.stack([x.data for x in xs], axis=axis), xs, axis)


def _stack_bw(ctx, g):
    ax = ctx
    return tuple(np.moveaxis(g, ax, 0))


def slice_axis(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    return _make("slice", a.data[idx], (a,), (a.shape, idx))


def _slice_bw(ctx, g):
    shape, idx = ctx
    return (_Scatter(shape, idx, g),)


def index(a, i: int) -> Tensor:
    """Select entry ``i`` of the leading axis, dropping that axis."""
    a = as_tensor(a)
    if not (0 <= i < a.shape[0]):
        raise ShapeError(f"index: {i} out of range for extent {a.shape[0]}")
    return _make("index", a.data[i], (a,), (a.shape, i))


def _index_bw(ctx, g):
    shape, i = ctx
    return (_Scatter(shape, i, g),)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[ax]):
        raise ShapeError(f"take: index out of range for extent {a.shape[ax]}")
    return _make("take", np.take(a.data, indices, axis=ax), (a,), (a.shape, indices, ax))


def _take_bw(ctx, g):
    shape, indices, ax = ctx
    out = np.zeros(shape, dtype=DTYPE)
    moved = np.moveaxis(out, ax, 0)
    np.add.at(moved, indices, np.moveaxis(g, ax, 0))
    return (out,)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make("reshape", out, (a,), a.shape)


def _reshape_bw(ctx, g):
    return (g.reshape(ctx),)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for {a.ndim}-d operand")
    return _make("transpose", np.transpose(a.data, axes), (a,), tuple(np.argsort(axes)))


def _transpose_bw(ctx, g):
    return (np.transpose(g, ctx),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), out)


def _exp_bw(ctx, g):
    return (g * ctx,)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), a.data)


def _log_bw(ctx, g):
    return (g / ctx,)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), out)


def _sqrt_bw(ctx, g):
    with np.errstate(divide="ignore"):
        return (g * 0.5 / ctx,)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), a.data)


def _square_bw(ctx, g):
    return (2.0 * g * ctx,)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), out)


def _sigmoid_bw(ctx, g):
    return (g * ctx * (1.0 - ctx),)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), out)


def _tanh_bw(ctx, g):
    return (g * (1.0 - ctx * ctx),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), mask)


def _relu_bw(ctx, g):
    return (g * ctx,)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _make("softplus", out, (a,), v)


def _softplus_bw(ctx, g):
    return (g * 0.5 * (1.0 + np.tanh(0.5 * ctx)),)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the adjoint passes only where the input is inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clamp", np.clip(a.data, lo, hi), (a,), inside)


def _clamp_bw(ctx, g):
    return (g * ctx,)


def maximum_const(a, c: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= c
    return _make("maximum_const", np.where(mask, a.data, c), (a,), mask)


def _maximum_const_bw(ctx, g):
    return (g * ctx,)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), (a.shape, axis, keepdims))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _sum_bw(ctx, g):
    shape, axis, keepdims = ctx
    return (np.array(_expand_reduced(g, shape, axis, keepdims)),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size // max(np.size(out), 1)
    return _make("mean", out, (a,), (a.shape, axis, keepdims, n))


def _mean_bw(ctx, g):
    shape, axis, keepdims, n = ctx
    return (np.array(_expand_reduced(g, shape, axis, keepdims)) / n,)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = (m + np.log(tot)).squeeze(axis)
    return _make("logsumexp", out, (a,), (s / tot, axis))


def _logsumexp_bw(ctx, g):
    p, axis = ctx
    return (np.expand_dims(g, axis) * p,)


# ---------------------------------------------------------------- batchnorm

@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (eval-mode normalizers)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, features: int) -> "BatchNormState":
        return cls(np.zeros(features, dtype=DTYPE), np.ones(features, dtype=DTYPE))


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over the second-to-last axis.

    ``x`` is (batch, features) or (groups, batch, features); with groups each
    group (e.g. one time step) is normalized by its own batch statistics, and
    the running statistics move by the group-averaged batch statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 3) or x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise ShapeError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if x.shape[-1] != state.running_mean.shape[0]:
        raise ShapeError("batchnorm: feature count differs from running statistics")
    if training:
        n = x.shape[-2]
        if n < 1:
            raise ShapeError("batchnorm: empty batch")
        mu = x.data.mean(axis=-2, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=-2, keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv
        unbiased = var * (n / (n - 1)) if n > 1 else var
        m = state.momentum
        batch_mean = mu.reshape(-1, mu.shape[-1]).mean(axis=0)
        batch_var = unbiased.reshape(-1, unbiased.shape[-1]).mean(axis=0)
        state.running_mean = (1 - m) * state.running_mean + m * batch_mean
        state.running_var = (1 - m) * state.running_var + m * batch_var
        ctx = (True, xhat, inv, gamma.data)
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        ctx = (False, xhat, inv, gamma.data)
    out = xhat * gamma.data + beta.data
    return _make("batchnorm", out, (x, gamma, beta), ctx)


def _batchnorm_bw(ctx, g):
    training, xhat, inv, gamma = ctx
    red = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=red)
    dbeta = g.sum(axis=red)
    dxhat = g * gamma
    if training:
        dx = inv * (dxhat - dxhat.mean(axis=-2, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-2, keepdims=True))
    else:
        dx = dxhat * inv
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- recurrent cells
# Each cell is one graph node with a hand-derived adjoint; the test suite
# checks them against the same cell composed from the primitives above.

def _sig(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _check_cell(op, x, h, Wx, Wh, gates):
    H = h.shape[-1]
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeError(f"{op}: x {x.shape} and h {h.shape} must be (batch, features)")
    if Wx.shape != (x.shape[1], gates * H) or Wh.shape != (H, gates * H):
        raise ShapeError(f"{op}: weights {Wx.shape}, {Wh.shape} do not fit x {x.shape}, h {h.shape}")


def gru_cell(x, h, Wx, Wh, bx, bh) -> Tensor:
    """h' = (1 - z) n + z h with r, z = sigmoid(.), n = tanh(gx_n + r * gh_n);
    gate blocks are ordered [r, z, n] along the weight columns."""
    x, h, Wx, Wh, bx, bh = (as_tensor(v) for v in (x, h, Wx, Wh, bx, bh))
    _check_cell("gru_cell", x, h, Wx, Wh, 3)
    H = h.shape[-1]
    gx = x.data @ Wx.data + bx.data
    gh = h.data @ Wh.data + bh.data
    r = _sig(gx[:, :H] + gh[:, :H])
    z = _sig(gx[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * ghn)
    out = n + z * (h.data - n)
    return _make("gru_cell", out, (x, h, Wx, Wh, bx, bh), (x.data, h.data, Wx.data, Wh.data, r, z, n, ghn))


def _gru_cell_bw(ctx, g):
    x, h, Wx, Wh, r, z, n, ghn = ctx
    dn = g * (1.0 - z)
    dz = g * (h - n)
    dan = dn * (1.0 - n * n)
    dar = dan * ghn * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dgx = np.concatenate([dar, daz, dan], axis=1)
    dgh = np.concatenate([dar, daz, dan * r], axis=1)
    dx = dgx @ Wx.T
    dh = dgh @ Wh.T + g * z
    return dx, dh, x.T @ dgx, h.T @ dgh, dgx.sum(axis=0), dgh.sum(axis=0)


def rnn_cell(x, h, Wx, Wh, b) -> Tensor:
    """h' = tanh(x Wx + h Wh + b)."""
    x, h, Wx, Wh, b = (as_tensor(v) for v in (x, h, Wx, Wh, b))
    _check_cell("rnn_cell", x, h, Wx, Wh, 1)
    out = np.tanh(x.data @ Wx.data + h.data @ Wh.data + b.data)
    return _make("rnn_cell", out, (x, h, Wx, Wh, b), (x.data, h.data, Wx.data, Wh.data, out))


def _rnn_cell_bw(ctx, g):
    x, h, Wx, Wh, out = ctx
    da = g * (1.0 - out * out)
    return da @ Wx.T, da @ Wh.T, x.T @ da, h.T @ da, da.sum(axis=0)


def lstm_cell(x, h, c, Wx, Wh, b) -> Tensor:
    """One LSTM step; returns [h', c'] packed along the last axis.
    Gate blocks are ordered [i, f, g, o]."""
    x, h, c, Wx, Wh, b = (as_tensor(v) for v in (x, h, c, Wx, Wh, b))
    _check_cell("lstm_cell", x, h, Wx, Wh, 4)
    if c.shape != h.shape:
        raise ShapeError(f"lstm_cell: cell {c.shape} vs hidden {h.shape}")
    H = h.shape[-1]
    a = x.data @ Wx.data + h.data @ Wh.data + b.data
    i = _sig(a[:, :H])
    f = _sig(a[:, H:2 * H])
    gg = np.tanh(a[:, 2 * H:3 * H])
    o = _sig(a[:, 3 * H:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    out = np.concatenate([o * tc, c_new], axis=1)
    return _make("lstm_cell", out, (x, h, c, Wx, Wh, b), (x.data, h.data, c.data, Wx.data, Wh.data, i, f, gg, o, tc))


def _lstm_cell_bw(ctx, g):
    x, h, c, Wx, Wh, i, f, gg, o, tc = ctx
    H = h.shape[-1]
    dh_out, dc_out = g[:, :H], g[:, H:]
    do = dh_out * tc
    dc = dc_out + dh_out * o * (1.0 - tc * tc)
    da = np.concatenate([
        dc * gg * i * (1.0 - i),
        dc * c * f * (1.0 - f),
        dc * i * (1.0 - gg * gg),
        do * o * (1.0 - o),
    ], axis=1)
    return da @ Wx.T, da @ Wh.T, dc * f, x.T @ da, h.T @ da, da.sum(axis=0)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _add_bw,
    "sub": _sub_bw,
    "mul": _mul_bw,
    "div": _div_bw,
    "neg": _neg_bw,
    "scale": _scale_bw,
    "matmul": _matmul_bw,
    "matmul_t": _matmul_t_bw,
    "linear": _linear_bw,
    "gru_cell": _gru_cell_bw,
    "rnn_cell": _rnn_cell_bw,
    "lstm_cell": _lstm_cell_bw,
    "concat": _concat_bw,
    "stack": _stack_bw,
    "slice": _slice_bw,
    "index": _index_bw,
    "take": _take_bw,
    "reshape": _reshape_bw,
    "transpose": _transpose_bw,
    "exp": _exp_bw,
    "log": _log_bw,
    "sqrt": _sqrt_bw,
    "square": _square_bw,
    "sigmoid": _sigmoid_bw,
    "tanh": _tanh_bw,
    "relu": _relu_bw,
    "softplus": _softplus_bw,
    "clamp": _clamp_bw,
    "maximum_const": _maximum_const_bw,
    "sum": _sum_bw,
    "mean": _mean_bw,
    "logsumexp": _logsumexp_bw,
    "batchnorm": _batchnorm_bw,
}


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate adjoints are transient; leaf adjoints accumulate across
    calls until ``zero_grad``.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owned: set[int] = set()  # adjoint buffers private to this pass, safe to mutate
    for node in reversed(_topo_order(root)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = BACKWARD_RULES[node.op](node.ctx, g)
        for p, gp in zip(node.parents, grads):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            if isinstance(gp, _Scatter):
                if k not in adj:
                    adj[k] = gp.dense()
                    owned.add(k)
                    continue
                if k not in owned:
                    adj[k] = np.array(adj[k], dtype=DTYPE)
                    owned.add(k)
                adj[k][gp.key] += gp.value
            elif k in adj:
                if k in owned:
                    adj[k] += gp
                else:
                    adj[k] = adj[k] + gp
                    owned.add(k)
            else:
                adj[k] = gp


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- grad check

def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, dict):
        return dict(params)
    return {(p.name or f"param{i}"): p for i, p in enumerate(params)}


def grad_check_per_param(f: Callable[[], Tensor], params, eps: float = 1e-6) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients,
    per parameter.  ``f`` rebuilds the scalar graph from the current values
    of ``params`` on every call."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = _as_named(params)
    for p in named.values():
        p.grad = None
    root = f()
    backward(root)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}
    report: dict[str, float] = {}
    with no_grad():
        for k, p in named.items():
            worst = 0.0
            flat = p.data.reshape(-1)
            an = analytic[k].reshape(-1)
            for i in range(flat.size):
                coord = np.unravel_index(i, p.shape)
                if not np.isfinite(an[i]):
                    raise GradCheckError(k, coord, "analytic")
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                if not np.isfinite(num):
                    raise GradCheckError(k, coord, "numeric")
                denom = max(abs(an[i]), abs(num), 1e-8)
                worst = max(worst, abs(an[i] - num) / denom)
            report[k] = worst
    for p in named.values():
        p.grad = None
    return report


def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-6) -> float:
    report = grad_check_per_param(f, params, eps)
    return max(report.values(), default=0.0)
