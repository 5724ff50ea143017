"""Central finite-difference checks for first and second-order gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tape import grad
from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)`` over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def numerical_gradient(
    fn: Callable[[], float],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-5,
    entries: Sequence[Sequence[tuple]] | None = None,
) -> list[np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. arrays perturbed in place.

    When ``entries`` is given, only those multi-indices are perturbed and the
    result for array ``i`` is a flat vector aligned with ``entries[i]``.
    """
    out = []
    for i, arr in enumerate(arrays):
        idxs = list(np.ndindex(arr.shape)) if entries is None else list(entries[i])
        g = np.zeros(len(idxs))
        for j, idx in enumerate(idxs):
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = fn()
            arr[idx] = orig - eps
            fm = fn()
            arr[idx] = orig
            g[j] = (fp - fm) / (2 * eps)
        out.append(g.reshape(arr.shape) if entries is None else g)
    return out


def check_op(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error of d<w, fn(x)>/dx against finite differences.

    A fixed random cotangent ``w`` turns a tensor-valued ``fn`` into a scalar
    so every output entry is exercised.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    params = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*params)
    w = np.random.default_rng([seed, 0xC07]).standard_normal(out.shape)
    loss = (out * Tensor(w)).sum()
    analytic = grad(loss, params)

    def scalar():
        vals = fn(*[Tensor(a) for a in arrays]).data
        return float(np.sum(vals * w))

    numeric = numerical_gradient(scalar, arrays, eps)
    return max(relative_error(a.data, n) for a, n in zip(analytic, numeric))


def check_second_order(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Check d/dx of ``<v, d fn / dx>`` built with ``create_graph=True``.

    The scalar ``s(x) = <v, grad fn(x)>`` is differentiated once more by
    autodiff and compared against central differences of ``s``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng([seed, 0xC07])
    vs = [rng.standard_normal(a.shape) for a in arrays]

    def inner(tensors):
        first = grad(fn(*tensors), tensors, create_graph=True)
        total = None
        for g, v in zip(first, vs):
            term = (g * Tensor(v)).sum()
            total = term if total is None else total + term
        return total

    params = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = grad(inner(params), params)

    def scalar():
        return inner([Tensor(a, requires_grad=True) for a in arrays]).item()

    numeric = numerical_gradient(scalar, arrays, eps)
    return max(relative_error(a.data, n) for a, n in zip(analytic, numeric))
