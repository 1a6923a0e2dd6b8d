"""Dense float64 tensors with reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to an
implicit graph. Nodes carry a global sequence number, so ``backward`` can
walk them in reverse append order. A graph is single-use: after one
backward pass its saved context is released and a second pass raises
:class:`GraphStateError`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffTensor",
    "ShapeError",
    "EmptyRegionError",
    "GraphStateError",
    "ContractError",
    "tensor",
    "param",
    "no_grad",
    "backward",
    "finite_diff_grad",
    "softmax",
    "log_softmax",
    "conv2d",
    "masked_mean",
    "cosine_similarity",
    "cosine_matrix",
    "matmul",
    "relu",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "concat",
    "stack",
    "clamp_min",
    "max_along",
]


class ShapeError(ValueError):
    pass


class EmptyRegionError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "inputs", "backward_fn", "released")

    def __init__(self, inputs, backward_fn):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.released = False


class DiffTensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    # -- basic protocol -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.values)

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> DiffTensor:
    return DiffTensor(values, requires_grad=requires_grad, name=name)


def param(values, name: str | None = None) -> DiffTensor:
    return DiffTensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def _wrap(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _make(values: np.ndarray, inputs: Sequence[DiffTensor], backward_fn: Callable) -> DiffTensor:
    """Build the output tensor and, if needed, record its node.

    ``backward_fn(g)`` returns one gradient (or None) per input.
    """
    out = DiffTensor(values)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------
def add(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> DiffTensor:
    a = _wrap(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def mul(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.values, b.values
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def exp(a) -> DiffTensor:
    a = _wrap(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> DiffTensor:
    a = _wrap(a)
    av = a.values
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> DiffTensor:
    """Elementwise square root; the gradient at exactly 0 is taken as 0."""
    a = _wrap(a)
    out = np.sqrt(a.values)

    def back(g):
        return (np.divide(g * 0.5, out, out=np.zeros(np.broadcast(g, out).shape), where=out > 0),)

    return _make(out, (a,), back)


def relu(a) -> DiffTensor:
    a = _wrap(a)
    pos = a.values > 0
    return _make(np.where(pos, a.values, 0.0), (a,), lambda g: (g * pos,))


def softplus(a) -> DiffTensor:
    a = _wrap(a)
    av = a.values
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _make(out, (a,), lambda g: (g * sig,))


def clamp_min(a, lo: float) -> DiffTensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = _wrap(a)
    keep = a.values > lo
    return _make(np.where(keep, a.values, lo), (a,), lambda g: (g * keep,))


def clamp_max(a, hi: float) -> DiffTensor:
    a = _wrap(a)
    keep = a.values < hi
    return _make(np.where(keep, a.values, hi), (a,), lambda g: (g * keep,))


# -- reductions and shape ---------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def sum_(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.values.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    n = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def max_along(a, axis: int) -> DiffTensor:
    """Maximum along one axis; gradient goes to the first maximal entry."""
    a = _wrap(a)
    (ax,) = _norm_axis(axis, a.ndim)
    idx = np.argmax(a.values, axis=ax)
    out = np.take_along_axis(a.values, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(out, (a,), bw)


def reshape(a, shape) -> DiffTensor:
    a = _wrap(a)
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> DiffTensor:
    a = _wrap(a)
    out = np.transpose(a.values, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> DiffTensor:
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.values[idx], (a,), bw)


def concat(parts: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.values for p in parts], axis=axis)
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(parts: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    parts = [_wrap(p) for p in parts]
    out = np.stack([p.values for p in parts], axis=axis)
    n = len(parts)
    return _make(out, parts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def matmul(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape}")
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# -- composite ops ------------------------------------------------------------
def softmax(x, axis: int = 0) -> DiffTensor:
    """Max-subtracted softmax; the backward is fused rather than composed."""
    x = _wrap(x)
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.values - x.values.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x, axis: int = 0) -> DiffTensor:
    x = _wrap(x)
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.values - x.values.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * g.sum(axis=ax, keepdims=True),))


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (C, ho, wo, k, k) strided view
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> DiffTensor:
    """Cross-correlation of a C_in x H x W input with a C_out x C_in x k x k kernel.

    Output size uses floor division, as in the usual deep-learning convention.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 3-d input and 4-d kernel, got {x.shape}, {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc, k, k2 = kernel.shape
    if kc != c_in or k != k2:
        raise ShapeError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise ShapeError("kernel size must be odd")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape} too small for kernel {k} with padding {padding}")

    xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding))) if padding else x.values
    # im2col: rows ordered (c, i, j) to match the kernel layout
    cols = _windows(xp, k, stride, ho, wo).transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, ho * wo)
    kmat = kernel.values.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, ho, wo)
    inputs = [x, kernel]
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.values[:, None, None]
        inputs.append(bias)

    def bw(g):
        gm = g.reshape(c_out, -1)
        gk = (gm @ cols.T).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gm).reshape(c_in, k, k, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(gm.sum(axis=1))
        return tuple(grads)

    return _make(out, inputs, bw)


def masked_mean(x, mask: np.ndarray) -> DiffTensor:
    """Per-channel mean of a C x h x w tensor over the active pixels of ``mask``."""
    x = _wrap(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[1:]:
        raise ShapeError(f"mask {m.shape} does not match feature map {x.shape}")
    n = int(m.sum())
    if n == 0:
        raise EmptyRegionError("masked_mean over an empty mask")
    w = m / n
    shape = x.shape
    out = (x.values * w).sum(axis=(1, 2))
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, None, None] * w, shape).copy(),))


def cosine_matrix(protos, feats, eps: float = 1e-8) -> DiffTensor:
    """Cosines between n prototypes (n x C) and N feature columns (C x N) -> n x N."""
    protos, feats = _wrap(protos), _wrap(feats)
    pn = clamp_min(sqrt((protos * protos).sum(axis=1, keepdims=True) + 0.0), eps)
    fn = clamp_min(sqrt((feats * feats).sum(axis=0, keepdims=True) + 0.0), eps)
    return matmul(protos / pn, feats / fn)


def cosine_similarity(a, b, eps: float = 1e-8) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
        raise ShapeError(f"cosine_similarity needs equal 1-d shapes, got {a.shape}, {b.shape}")
    na = clamp_min(sqrt((a * a).sum()), eps)
    nb = clamp_min(sqrt((b * b).sum()), eps)
    return (a * b).sum() / (na * nb)


# -- backward -----------------------------------------------------------------
def backward(loss: DiffTensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones(loss.shape)
        return

    # collect reachable nodes
    nodes: dict[int, DiffTensor] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        node = t._node
        if node is None or id(t) in nodes:
            continue
        if node.released:
            raise GraphStateError("graph already consumed by a previous backward pass")
        nodes[id(t)] = t
        stack_.extend(inp for inp in node.inputs if inp.requires_grad)

    order = sorted(nodes.values(), key=lambda t: t._node.seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in order:
        node = t._node
        g = grads.pop(id(t), None)
        if g is not None:
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
        node.backward_fn = None
        node.released = True


def finite_diff_grad(f: Callable[[DiffTensor], DiffTensor | float], x: DiffTensor,
                     step: float = 1e-4, indices: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of a scalar function with respect to ``x``.

    ``x.values`` is perturbed in place and restored. When ``indices`` is
    given only those flat coordinates are probed; others are left as NaN.
    """
    flat = x.values.reshape(-1)
    out = np.full(flat.shape, np.nan) if indices is not None else np.empty(flat.shape)
    idx = range(flat.size) if indices is None else indices

    def value():
        with no_grad():
            r = f(x)
        return r.item() if isinstance(r, DiffTensor) else float(r)

    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = value()
        flat[i] = orig - step
        lo = value()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
