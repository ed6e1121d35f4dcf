"""Dense tensors with tape-recorded reverse-mode differentiation.

A :class:`Tape` owns an ordered list of primitive operations.  Leaves are
registered with :meth:`Tape.watch`; every operation that touches a watched
tensor (directly or transitively) is appended to the same tape, so the
backward pass is a plain reverse walk with no topological sort.  Tensors
created without a tape are constants.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, ValidationError

Array = np.ndarray


class Tape:
    def __init__(self):
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.leaves: dict[str, Tensor] = {}

    def watch(self, value, name: str) -> "Tensor":
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already watched on this tape")
        t = Tensor(value, tape=self, name=name)
        self.leaves[name] = t
        return t

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], vjp: Callable) -> None:
        self.nodes.append((out, parents, vjp))

    def clear(self) -> None:
        """Drop recorded nodes so intermediate arrays can be freed promptly."""
        self.nodes = []
        self.leaves = {}

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """Immutable float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "name")
    __array_priority__ = 100.0

    def __init__(self, data, tape: Tape | None = None, name: str | None = None, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check and not np.isfinite(arr).all():
            raise ValidationError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.tape = tape
        self.name = name

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> Array:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __len__(self):
        return self.data.shape[0]

    # ---- operators -----------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t):
    raise ContractError(f"expected a 1-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(value: Array, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    out = Tensor(value, tape=tape, check=False)
    if tape is not None:
        tape.record(out, tuple(parents), vjp)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data - b.data, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data * b.data, (a, b),
               lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _op(out, (a, b),
               lambda g: (_unbroadcast(g / b.data, a.shape),
                          _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    return _op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("only constant exponents are supported")
    p = float(exponent)
    if p == 2.0:
        return _op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))
    return _op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    return _op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    out = np.sqrt(a.data)
    return _op(out, (a,), lambda g: (0.5 * g / out,))


def absolute(a) -> Tensor:
    return _op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sin(a) -> Tensor:
    return _op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    return _op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def arctan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    r2 = x.data * x.data + y.data * y.data
    return _op(np.arctan2(y.data, x.data), (y, x),
               lambda g: (_unbroadcast(g * x.data / r2, y.shape),
                          _unbroadcast(-g * y.data / r2, x.shape)))


def clip(a, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)
    return _op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(mask: Array, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _op(np.where(mask, a.data, b.data), (a, b),
               lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                          _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# ---- activations --------------------------------------------------------

def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _op(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a) -> Tensor:
    on = a.data > 0
    return _op(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    slope_arr = np.where(a.data > 0, 1.0, slope)
    return _op(a.data * slope_arr, (a,), lambda g: (g * slope_arr,))


def softplus(a, beta: float = 1.0) -> Tensor:
    bx = beta * a.data
    out = (np.maximum(bx, 0.0) + np.log1p(np.exp(-np.abs(bx)))) / beta
    return _op(out, (a,), lambda g: (g * _stable_sigmoid(bx),))


def softmax(a, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _op(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


# ---- reductions and shape ops ------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _op(out, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _op(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _op(out, (a,), vjp)


def take_rows(a, idx: Array) -> Tensor:
    """Gather ``a[idx]`` along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        n = a.shape[0]
        flat = g.reshape(len(idx), -1)
        full = np.empty((n, flat.shape[1]))
        for c in range(flat.shape[1]):
            full[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n)
        return (full.reshape(a.shape),)

    return _op(out, (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _op(out, ts, vjp)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    return _op(out, ts, lambda g: tuple(np.moveaxis(g, axis, 0)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _op(out, (a, b), vjp)


def norm(a, axis: int = -1, eps: float = 0.0, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; ``eps`` is added under the root."""
    sq = a.data * a.data
    out = np.sqrt(sq.sum(axis=axis, keepdims=True) + eps)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (gk * a.data / safe,)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return _op(value, (a,), vjp)


def cross(a, b) -> Tensor:
    """Row-wise cross product of (..., 3) tensors."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.cross(a.data, b.data)
    return _op(out, (a, b),
               lambda g: (_unbroadcast(np.cross(b.data, g), a.shape),
                          _unbroadcast(np.cross(g, a.data), b.shape)))


# ---- differentiation ----------------------------------------------------

def gradient(tape: Tape, loss: Tensor, wrt: Iterable[str] | None = None) -> dict[str, Array]:
    """Reverse sweep from a scalar ``loss`` to every watched leaf.

    Leaves unreachable from the loss receive zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"gradient needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for out, parents, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, vjp(g)):
            if pg is None or p.tape is None:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    names = tape.leaves.keys() if wrt is None else wrt
    result = {}
    for name in names:
        leaf = tape.leaves[name]
        result[name] = grads.get(id(leaf), np.zeros_like(leaf.data))
    return result
