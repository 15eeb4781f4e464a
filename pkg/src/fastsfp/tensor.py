"""Dense float64 primitives and the finite-difference gradient oracle.

Every array in the library is a C-contiguous ``numpy.float64`` ndarray; the
helpers here validate shapes and raise :class:`DimensionError` instead of
relying on numpy broadcasting.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .exceptions import DegenerateVectorError, DimensionError

NORM_EPS = 1e-12


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous float64 array (copying only if needed)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    """Matrix product of a 2-D ``a`` (m x k) and 2-D ``b`` (k x n)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``.

    ``-inf`` entries are allowed (masked positions) as long as each slice has
    at least one finite entry.
    """
    x = as_tensor(x)
    if x.ndim == 0:
        raise DimensionError("softmax of a scalar is undefined")
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def l2_normalize(v, axis: int = -1, eps: float = NORM_EPS) -> np.ndarray:
    """Scale every slice along ``axis`` to unit Euclidean norm."""
    v = as_tensor(v)
    norms = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(norms <= eps):
        raise DegenerateVectorError("cannot normalize a slice with norm <= %g" % eps)
    return v / norms


def mse(a, b) -> float:
    """Mean of squared elementwise differences of two equally shaped arrays."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def mse_grad(a, b) -> np.ndarray:
    """Gradient of ``mse(a, b)`` with respect to ``b``."""
    a = as_tensor(a)
    b = as_tensor(b)
    return -2.0 * (a - b) / a.size


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``."""
    x = as_tensor(x).copy()
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x)
        flat[i] = orig - eps
        f_minus = f(x)
        flat[i] = orig
        g[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_rel_error(analytic, numeric) -> float:
    """Elementwise ``|a - n| / max(1, |a|, |n|)``, maximized over entries."""
    a = as_tensor(analytic)
    n = as_tensor(numeric)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))
