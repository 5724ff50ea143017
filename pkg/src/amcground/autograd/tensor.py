"""Dense tensors with a recorded computation graph.

Every backward rule below is written in terms of ``Tensor`` operations rather
than raw numpy, so when gradients are built with ``create_graph=True`` they
are themselves graph nodes and can be differentiated again.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError, DomainError, EmptyDomainError

DEFAULT_DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.enabled = bool(mode)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops graph recording."""
    return set_grad_enabled(False)


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype == np.float32:
            dtype = np.float32
        else:
            dtype = DEFAULT_DTYPE
    return np.asarray(data, dtype=dtype)


class Tensor:
    """n-dimensional float array that may participate in a graph.

    ``_parents`` and ``_backward`` are set only on tensors produced by an
    operation while grad mode is on and some input requires grad. The
    backward callable receives the output gradient and a tuple of flags
    saying which parents need a gradient, and returns one gradient (or
    ``None``) per parent.
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

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

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _constant(arr, like: Tensor) -> Tensor:
    return Tensor(np.asarray(arr, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; only scalar-with-tensor broadcasting is implicit."""
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if a.shape == b.shape:
        return a, b
    if a.ndim == 0 or a.size == 1 and a.ndim <= 1:
        return broadcast_to(reshape(a, ()) if a.ndim else a, b.shape), b
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return a, broadcast_to(reshape(b, ()) if b.ndim else b, a.shape)
    raise DimensionError(
        f"elementwise operands must have equal shapes or one scalar, got {a.shape} and {b.shape}"
    )


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g, needs):
        return g if needs[0] else None, g if needs[1] else None

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g, needs):
        return g if needs[0] else None, neg(g) if needs[1] else None

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g, needs):
        return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g, needs):
        ga = div(g, b) if needs[0] else None
        gb = neg(div(mul(g, a), mul(b, b))) if needs[1] else None
        return ga, gb

    return _result(a.data / b.data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (neg(g),)

    return _result(-a.data, (a,), "neg", backward)


def power(a: Tensor, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant scalar exponent."""
    p = float(exponent)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError("fractional power of a negative value")
    if p < 0 and np.any(a.data == 0):
        raise DomainError("negative power of zero")

    def backward(g, needs):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _result(np.power(a.data, p), (a,), "power", backward)


def exp(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (mul(g, out),)

    out = _result(np.exp(a.data), (a,), "exp", backward)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")

    def backward(g, needs):
        return (div(g, a),)

    return _result(np.log(a.data), (a,), "log", backward)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    positive = a.data > 0

    def backward(g, needs):
        return (mul(g, _constant(positive, g)),)

    return _result(np.where(positive, a.data, 0.0).astype(a.dtype), (a,), "relu", backward)


def tanh(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _result(np.tanh(a.data), (a,), "tanh", backward)
    return out


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, relu, exp, log, tanh, neg."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"relu": relu, "exp": exp, "log": log, "tanh": tanh, "neg": neg}
    if op in binary:
        if b is None:
            raise DimensionError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either ``[k, n]`` (shared across the
    leading axes of ``a``) or ``[..., k, n]`` with identical leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = matmul(g, _swap_last(b))
        if needs[1]:
            if shared:
                k, n = b.shape
                gb = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1, n)))
            else:
                gb = matmul(_swap_last(a), g)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), "matmul", backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _keepdims_shape(shape, axes):
    if axes is None:
        return (1,) * len(shape)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _check_nonempty(a: Tensor, axes):
    if a.size == 0 or (axes is not None and any(a.shape[ax] == 0 for ax in axes)):
        raise EmptyDomainError(f"reduction over an empty domain (shape {a.shape})")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)

    def backward(g, needs):
        g = reshape(g, _keepdims_shape(a.shape, axes))
        return (broadcast_to(g, a.shape),)

    return _result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient goes to the first maximal element (row-major)."""
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    if axes is not None and len(axes) > 1:
        raise DimensionError("max reduces over a single axis or all elements")
    if axes is None:
        flat = np.argmax(a.data)
        route = np.zeros(a.size, dtype=a.dtype)
        route[flat] = 1.0
        route = route.reshape(a.shape)
    else:
        ax = axes[0]
        idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
        route = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(route, idx, 1.0, axis=ax)

    def backward(g, needs):
        g = broadcast_to(reshape(g, _keepdims_shape(a.shape, axes)), a.shape)
        return (mul(g, _constant(route, g)),)

    return _result(np.max(a.data, axis=axes, keepdims=keepdims), (a,), "max", backward)


def reduce(op: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    funcs = {"sum": tsum, "mean": mean, "max": tmax}
    if op not in funcs:
        raise ValueError(f"unknown reduction {op!r}")
    return funcs[op](a, axis, keepdims)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc

    def backward(g, needs):
        return (reshape(g, a.shape),)

    return _result(data, (a,), "reshape", backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), "transpose", backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward rule sums back."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc

    def backward(g, needs):
        return (sum_to(g, a.shape),)

    return _result(data, (a,), "broadcast_to", backward)


def sum_to(a: Tensor, shape) -> Tensor:
    """Adjoint of :func:`broadcast_to`."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and a.shape[lead + i] != 1
    )
    data = np.sum(a.data, axis=axes, keepdims=True).reshape(shape)

    def backward(g, needs):
        return (broadcast_to(g, a.shape),)

    return _result(data, (a,), "sum_to", backward)


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]

    def backward(g, needs):
        return (scatter(g, index, a.shape),)

    return _result(np.array(data, copy=True), (a,), "getitem", backward)


def scatter(a: Tensor, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``a`` accumulated at ``index`` (adjoint of getitem)."""
    out = np.zeros(shape, dtype=a.dtype)
    np.add.at(out, index, a.data)

    def backward(g, needs):
        return (getitem(g, index),)

    return _result(out, (a,), "scatter", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise DimensionError(f"concat shape mismatch: {ref.shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g, needs):
        grads = []
        for i, flag in enumerate(needs):
            if not flag:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(getitem(g, tuple(sl)))
        return tuple(grads)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE))
