"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an immutable ``np.ndarray`` plus the closure needed to
push a cotangent back to its parents.  Graphs are built eagerly by the op
functions in this module and differentiated by :func:`backward`.

Every op checks its output for NaN/inf and raises :class:`NumericError`
naming the op, so a blow-up is reported where it happens rather than at the
loss.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mgf.errors import NumericError, ValidationError

_ids = itertools.count()
_state = threading.local()

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_LOG2E = 1.0 / np.log(2.0)


def fast_exp(x: np.ndarray) -> np.ndarray:
    """``exp`` via ``exp2``; several times faster than ``np.exp`` on some builds."""
    return np.exp2(np.multiply(x, _LOG2E))


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "grad_fn", "op", "id")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: GradFn | None = None
        self.op = op
        self.id = next(_ids)

    # -- conveniences -------------------------------------------------------
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
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return constant(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient."""
        _run_backward(self, None)

    # operators
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(x, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: GradFn, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    out = Tensor.__new__(Tensor)
    out.id = next(_ids)
    out.op = op
    if not np.isfinite(data).all():
        raise NumericError(f"numeric failure in op {op}#{out.id}")
    data.flags.writeable = False
    out.data = data
    out.grad = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.parents = parents if track else ()
    out.grad_fn = grad_fn if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValidationError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


# -- elementwise unary -------------------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = fast_exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),), "relu")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), grad_fn, "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient is zero where the clamp is active."""
    a = _as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- linear algebra / shape ------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValidationError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # stacked @ matrix: one GEMM over the flattened leading axes
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def grad_fn(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make(out, (a, b), grad_fn, "matmul")

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ValidationError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    src = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axs = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axs]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValidationError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def getitem(a, key) -> Tensor:
    a = _as_tensor(a)
    src = a.shape

    basic = all(isinstance(k, (slice, int, type(Ellipsis))) for k in (key if isinstance(key, tuple) else (key,)))

    def grad_fn(g):
        gx = np.zeros(src)
        if basic:  # no repeated elements, plain assignment suffices
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _make(a.data[key], (a,), grad_fn, "slice")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    src = a.shape

    def grad_fn(g):
        gx = np.zeros(src)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx.reshape(-1), np.moveaxis(g, axis, 0).reshape((-1,) + gm.shape[1:]))
        return (gx,)

    return _make(np.take(a.data, idx, axis=axis), (a,), grad_fn, "take")


# -- normalisation / reductions --------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = fast_exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = fast_exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    p = e / s

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), grad_fn, "logsumexp")


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (a,), grad_fn, "layer_norm")


# -- convolutions (channels-last: [batch, time, channels]) -------------------

def _windows(xp: np.ndarray, kernel: int, stride: int, n_out: int) -> np.ndarray:
    # [B, T_pad, C] -> [B, n_out, C, K]
    return sliding_window_view(xp, kernel, axis=1)[:, : stride * (n_out - 1) + 1 : stride]


def _overlap_add(cols: np.ndarray, stride: int, length: int) -> np.ndarray:
    # inverse of _windows: cols [B, n, C, K] summed into [B, length, C]
    b, n, c, k = cols.shape
    out = np.zeros((b, length, c))
    span = stride * (n - 1) + 1
    for j in range(k):
        out[:, j : j + span : stride, :] += cols[..., j]
    return out


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution. ``x``: [B, T, Cin]; ``w``: [Cout, Cin, K]; zero pad both sides."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ValidationError(f"conv1d: shape mismatch x{x.shape} w{w.shape}")
    b, t, cin = x.shape
    cout, _, k = w.shape
    tp = t + 2 * padding
    if tp < k:
        raise ValidationError(f"conv1d: input too short ({t} samples, kernel {k}, padding {padding})")
    n_out = (tp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    cols = _windows(xp, k, stride, n_out).reshape(b, n_out, cin * k)
    wm = w.data.reshape(cout, cin * k)
    out = cols @ wm.T

    def grad_fn(g):
        gw = (g.reshape(-1, cout).T @ cols.reshape(-1, cin * k)).reshape(w.shape)
        gcols = (g @ wm).reshape(b, n_out, cin, k)
        gxp = _overlap_add(gcols, stride, tp)
        return gxp[:, padding : padding + t], gw

    return _make(out, (x, w), grad_fn, "conv1d")


def conv_transpose1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 1-D convolution (adjoint of :func:`conv1d`).

    ``x``: [B, T, Cin]; ``w``: [Cin, Cout, K].  Output length is
    ``(T - 1) * stride - 2 * padding + K``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[0]:
        raise ValidationError(f"conv_transpose1d: shape mismatch x{x.shape} w{w.shape}")
    b, t, cin = x.shape
    _, cout, k = w.shape
    full = (t - 1) * stride + k
    length = full - 2 * padding
    if length < 1:
        raise ValidationError("conv_transpose1d: empty output")
    wm = w.data.reshape(cin, cout * k)
    cols = (x.data @ wm).reshape(b, t, cout, k)
    out = _overlap_add(cols, stride, full)[:, padding : padding + length]

    def grad_fn(g):
        gfull = np.zeros((b, full, cout))
        gfull[:, padding : padding + length] = g
        gcols = _windows(gfull, k, stride, t).reshape(b, t, cout * k)
        gx = gcols @ wm.T
        gw = (x.data.reshape(-1, cin).T @ gcols.reshape(-1, cout * k)).reshape(w.shape)
        return gx, gw

    return _make(out, (x, w), grad_fn, "conv_transpose1d")


# -- backward ---------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.id not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor, leaves: Iterable[Tensor] | None) -> dict[int, np.ndarray]:
    if root.size != 1:
        raise ValidationError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    if root.requires_grad:
        grads[root.id] = np.ones(root.shape)
        for node in reversed(_topo(root)):
            g = grads.get(node.id)
            if g is None or node.grad_fn is None:
                continue
            if node.parents:
                del grads[node.id]
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
    targets = list(leaves) if leaves is not None else None
    if targets is None:
        for node in _topo(root):
            if node.is_leaf and node.requires_grad:
                g = grads.get(node.id)
                node.grad = g if g is not None else np.zeros(node.shape)
    else:
        for node in targets:
            g = grads.get(node.id)
            node.grad = g if g is not None else np.zeros(node.shape)
    return grads


def backward(root: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. ``leaves`` (zeros where unreached).

    Also stores each gradient on the leaf's ``.grad``.
    """
    _run_backward(root, leaves)
    return [leaf.grad for leaf in leaves]
