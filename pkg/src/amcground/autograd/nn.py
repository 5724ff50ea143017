"""Composite and fused operations used by the transformer and the losses."""
from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, NumericError, ValidationError
from .tensor import (
    Tensor,
    _norm_axis,
    _result,
    add,
    as_tensor,
    broadcast_to,
    exp,
    matmul,
    mean,
    mul,
    power,
    reshape,
    sub,
    tanh,
    tsum,
    transpose,
)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; backward is ``y * (g - sum(g * y))``."""
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    (axis,) = _norm_axis(axis, a.ndim)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g, needs):
        gy = mul(g, out)
        s = broadcast_to(tsum(gy, axis, keepdims=True), a.shape)
        return (sub(gy, mul(out, s)),)

    out = _result(data, (a,), "softmax", backward)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(a.data).any():
        raise NumericError("log_softmax input contains NaN")
    (axis,) = _norm_axis(axis, a.ndim)
    m = np.max(a.data, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))

    def backward(g, needs):
        s = broadcast_to(tsum(g, axis, keepdims=True), a.shape)
        return (sub(g, mul(exp(out), s)),)

    out = _result(a.data - lse, (a,), "log_softmax", backward)
    return out


def _check_one_hot(target: np.ndarray, n_classes: int) -> None:
    if target.shape[-1] != n_classes:
        raise ValidationError(
            f"target length {target.shape[-1]} does not match logits length {n_classes}"
        )
    ok = np.isin(target, (0.0, 1.0)).all() and np.all(target.sum(axis=-1) == 1.0)
    if not ok:
        raise ValidationError("cross_entropy target must be one-hot")


def cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """``-log softmax(logits)[class]`` for one-hot targets.

    ``logits`` is ``[C]`` or ``[B, C]``; ``reduction`` applies over rows.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if target.shape != logits.shape:
        if target.ndim == logits.ndim:
            raise ValidationError(f"target shape {target.shape} != logits shape {logits.shape}")
        raise DimensionError(f"target shape {target.shape} != logits shape {logits.shape}")
    _check_one_hot(target, logits.shape[-1])
    per_row = -tsum(mul(log_softmax(logits, -1), Tensor(target)), -1)
    if reduction == "none" or logits.ndim == 1:
        return per_row
    if reduction == "sum":
        return tsum(per_row)
    if reduction == "mean":
        return mean(per_row)
    raise ValueError(f"unknown reduction {reduction!r}")


def one_hot(index, n_classes: int, dtype=np.float64) -> np.ndarray:
    index = np.asarray(index)
    out = np.zeros(index.shape + (n_classes,), dtype=dtype)
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must be ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = broadcast_to(mean(a, -1, keepdims=True), a.shape)
    centered = sub(a, mu)
    var = mean(mul(centered, centered), -1, keepdims=True)
    inv = broadcast_to(power(add(var, eps), -0.5), a.shape)
    y = mul(centered, inv)
    return add(mul(y, broadcast_to(gain, a.shape)), broadcast_to(bias, a.shape))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU; smooth, so second derivatives exist everywhere."""
    inner = mul(add(a, mul(power(a, 3.0), 0.044715)), _GELU_C)
    return mul(mul(a, 0.5), add(tanh(inner), 1.0))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add(y, broadcast_to(b, y.shape))
    return y


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    sq = tsum(mul(x, x), axis, keepdims=True)
    if np.any(sq.data == 0):
        raise NumericError("cannot normalize a zero vector")
    return mul(x, broadcast_to(power(sq, -0.5), x.shape))


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape ``[n_out, n_in]``."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"interpolation sizes must be positive, got {n_in} -> {n_out}")
    w = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(src).astype(int)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def bilinear_resize(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with corner-aligned bilinear sampling."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be positive, got {out_h}x{out_w}")
    if a.ndim < 2:
        raise DimensionError(f"bilinear_resize needs at least 2 axes, got {a.shape}")
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a
    ry = Tensor(interpolation_matrix(h, out_h, a.dtype))
    rx_t = Tensor(interpolation_matrix(w, out_w, a.dtype).T.copy())
    cols = matmul(a, rx_t)  # [..., h, out_w]
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    swapped = transpose(cols, tuple(axes))  # [..., out_w, h]
    rows = matmul(swapped, transpose(ry))  # [..., out_w, out_h]
    return transpose(rows, tuple(axes))


def key_padding_mask(key_valid: np.ndarray, n_queries: int, heads: int, dtype) -> Tensor:
    """Additive mask ``[B, heads, n_queries, n_keys]`` that removes invalid keys."""
    b, k = key_valid.shape
    add_mask = np.where(key_valid, 0.0, -1e9).astype(dtype)
    return Tensor(np.broadcast_to(add_mask[:, None, None, :], (b, heads, n_queries, k)))

