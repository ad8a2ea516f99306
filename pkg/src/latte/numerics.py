"""Dense-array primitives shared by every mixer.

Arrays are plain ``numpy.ndarray`` objects. The element type is chosen by the
caller (float32 for training, float64 for verification) and preserved by every
function here.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}")
    return np.dtype(precision)


def _check_axis(x: np.ndarray, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank-{x.ndim} array")
    return axis % x.ndim


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; safe for logits of magnitude up to ~1e4 and beyond."""
    logits = np.asarray(logits)
    axis = _check_axis(logits, axis)
    if logits.shape[axis] == 0:
        raise ValueError("degenerate distribution: softmax over an empty axis")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits)
    axis = _check_axis(logits, axis)
    if logits.shape[axis] == 0:
        raise ValueError("degenerate distribution: softmax over an empty axis")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cumulative_max(x: np.ndarray, time_axis: int = 0) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum.accumulate(x, axis=_check_axis(x, time_axis))


def shifted_exp_cumsum(logits: np.ndarray, weights: np.ndarray | None = None):
    """Running-max-shifted cumulative sums of ``exp(logits)``.

    ``logits`` has shape (T, L); ``weights`` (optional) has shape (T, M).
    Returns ``(norm, value, running_max)`` where::

        norm[t, l]     = sum_{s<=t} exp(logits[s, l] - m[t, l])
        value[t, l, :] = sum_{s<=t} exp(logits[s, l] - m[t, l]) * weights[s, :]
        m              = cumulative_max(logits)

    The accumulators are rescaled by ``exp(m[t-1] - m[t])`` before each add, so
    nothing overflows. Consumers should take ratios of ``norm`` and ``value``
    so that the ``exp(m)`` factor cancels.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ValueError("logits must have shape (T, L)")
    T, L = logits.shape
    if weights is not None:
        weights = np.asarray(weights)
        if weights.ndim != 2 or weights.shape[0] != T:
            raise ValueError("weights must have shape (T, M) matching logits")
    m = cumulative_max(logits, 0)
    norm = np.empty_like(logits)
    value = None if weights is None else np.empty((T, L, weights.shape[1]), dtype=logits.dtype)

    acc = np.zeros(L, dtype=logits.dtype)
    vacc = None if weights is None else np.zeros((L, weights.shape[1]), dtype=logits.dtype)
    prev = m[0]
    for t in range(T):
        revert = np.exp(prev - m[t])
        add = np.exp(logits[t] - m[t])
        acc = acc * revert + add
        norm[t] = acc
        if vacc is not None:
            vacc = vacc * revert[:, None] + add[:, None] * weights[t][None, :]
            value[t] = vacc
        prev = m[t]
    return norm, value, m


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64 if np.asarray(x).dtype.kind != "f" else np.asarray(x).dtype)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| scaled by the larger max-magnitude of the two arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(b).max())
    diff = np.abs(a - b).max()
    return float(diff / scale) if scale > 0 else float(diff)
