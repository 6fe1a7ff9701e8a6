"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation that touches a tensor requiring gradients is stamped with a
monotonically increasing sequence number.  That stamp is the tape: ``backward``
walks the reachable operations in exactly the reverse of their execution order.

Gradients are *overwritten* on every call to :func:`backward`, never
accumulated, so running backward twice on the same graph yields identical
results.

Subgradient choices: ``relu'(0) = 0``, ``abs'(0) = 0``, the gradient of the
Euclidean norm at the zero vector is the zero vector, ``max`` routes the whole
gradient to the first maximal element.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "custom_op",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "softplus",
    "abs",
    "scale",
    "power",
    "clip",
    "maximum",
    "minimum",
    "matmul",
    "sum",
    "mean",
    "l2_norm",
    "max",
    "softmax",
    "reshape",
    "transpose",
    "broadcast_to",
    "stack",
    "concatenate",
    "repeat",
    "conv2d",
]

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor data must be finite")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._parents = ()
        t._backward = None
        t._seq = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Wrap an array as a non-differentiable tensor without copying."""
    return Tensor._wrap(np.asarray(data, dtype=np.float64), False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Record an operation on the tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that contributed to ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor requiring grad")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    ops = sorted((t for t in nodes.values() if t._backward is not None), key=lambda t: -t._seq)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in ops:
        g = grads.get(id(t))
        if g is None:
            continue
        t.grad = g
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for t in nodes.values():
        if t._backward is None:
            g = grads.get(id(t))
            t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64)


# ---------------------------------------------------------------- elementwise


def _binary_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if b.size == 1 and b.ndim <= a.ndim:
        return a.shape
    if a.size == 1 and a.ndim <= b.ndim:
        return b.shape
    raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b)
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b)
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b)
    ad, bd = a.data, b.data
    return custom_op(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero in div")
    ad, bd = a.data, b.data
    out = ad / bd
    return custom_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a plain constant."""
    a = _as_tensor(a)
    c = float(c)
    return custom_op(a.data * c, (a,), lambda g: (g * c,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    ad = a.data
    if p < 1 and np.any(ad <= 0):
        raise ValueError("power with exponent < 1 needs positive input")
    return custom_op(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return custom_op(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return custom_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """Numerically stable ``log(1 + exp(a))``."""
    a = _as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return custom_op(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * ad)),))


def abs(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    sgn = np.sign(a.data)
    return custom_op(np.abs(a.data), (a,), lambda g: (g * sgn,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes where the input lies in the closed interval."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return custom_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def _select(a, b, take_a: np.ndarray) -> Tensor:
    sa, sb = a.shape, b.shape
    out = np.where(take_a, a.data, b.data)
    return custom_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    shape = _binary_shape(a, b)
    take_a = np.broadcast_to(a.data >= b.data, shape)
    return _select(a, b, take_a)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    shape = _binary_shape(a, b)
    take_a = np.broadcast_to(a.data <= b.data, shape)
    return _select(a, b, take_a)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return custom_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes)
    return custom_op(
        np.asarray(out), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)
    )


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum(a, axes), 1.0 / n)


def l2_norm(a, axis=None) -> Tensor:
    """Euclidean norm over ``axis`` (all axes by default); zero gradient at the origin."""
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axes))

    def bw(g):
        n = np.expand_dims(out, axes)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, ad / safe, 0.0) * np.expand_dims(g, axes),)

    return custom_op(np.asarray(out), (a,), bw)


def max(a, axis: int) -> Tensor:  # noqa: A001
    """Maximum along a single axis."""
    a = _as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    if a.shape[ax] == 0:
        raise ShapeError("max over an empty axis")
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax).squeeze(ax)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return custom_op(out, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    (ax,) = _norm_axes(axis, a.ndim)
    if a.shape[ax] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)
    return custom_op(s, (a,), lambda g: (s * (g - (g * s).sum(axis=ax, keepdims=True)),))


# ---------------------------------------------------------------- shape


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast (the only way to broadcast non-scalars)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {old} to {shape}") from None
    lead = len(shape) - len(old)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=keep, keepdims=True) if keep else g,)

    return custom_op(out, (a,), bw)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return custom_op(np.array(out, dtype=np.float64), (a,), bw)


def stack(ts: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    if len({t.shape for t in ts}) != 1:
        raise ShapeError(f"stack needs equal shapes, got {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=axis)
    return custom_op(
        out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts)))
    )


def concatenate(ts: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return custom_op(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def repeat(a, repeats: int, axis: int) -> Tensor:
    """Nearest-neighbour upsampling along one axis (``np.repeat`` semantics)."""
    a = _as_tensor(a)
    r = int(repeats)
    (ax,) = _norm_axes(axis, a.ndim)
    shape = a.shape

    def bw(g):
        new = shape[:ax] + (shape[ax], r) + shape[ax + 1 :]
        return (g.reshape(new).sum(axis=ax + 1),)

    return custom_op(np.repeat(a.data, r, axis=ax), (a,), bw)


# ---------------------------------------------------------------- convolution


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[O,C,kh,kw]``."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if c != kc:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kernel.shape} larger than padded input {x.shape}")
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
        parents.append(bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return custom_op(out, parents, bw)
