"""A small reverse-mode differentiation tape over numpy arrays.

Operations on :class:`Tensor` record a backward rule on the active
:class:`GradientTape`; :meth:`GradientTape.gradient` replays them in reverse.
Heavy mixers (the Latte scan, the gated recurrence, attention softmax) have
hand-written backward rules rather than being composed from elementwise ops.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import core
from .attention import rope_apply
from .macchiato import linear_recurrence

_TAPES: list["GradientTape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, name={self.name!r})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes)
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)


class GradientTape:
    """Records operations while active and maps a scalar loss back to its leaves."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, loss: Tensor, leaves: dict[str, Tensor] | None = None, scale: float = 1.0):
        """Backpropagate ``scale * d loss``; returns ``{name: grad}`` for the leaves."""
        if loss.data.size != 1:
            raise ValueError("gradient needs a scalar loss")
        for n in self.nodes:
            n.grad = None
        if leaves:
            for t in leaves.values():
                t.grad = None
        loss.grad = np.full_like(loss.data, scale)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                g = _unbroadcast(g, parent.shape)
                parent.grad = g if parent.grad is None else parent.grad + g
        if leaves is None:
            return {}
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in leaves.items()}


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _data(x):
    if isinstance(x, Tensor):
        return x.data
    # python scalars stay weakly typed so float32 graphs are not promoted
    return x if isinstance(x, (int, float)) else np.asarray(x)


def _node(data, parents: Sequence, backward: Callable) -> Tensor:
    needs = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs and _TAPES:
        out._parents = tuple(parents)
        out._backward = backward
        _TAPES[-1].nodes.append(out)
    return out


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a, b):
    return _node(_data(a) + _data(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return _node(_data(a) - _data(b), (a, b), lambda g: (g, -g))


def mul(a, b):
    A, B = _data(a), _data(b)
    return _node(A * B, (a, b), lambda g: (g * B, g * A))


def div(a, b):
    A, B = _data(a), _data(b)
    return _node(A / B, (a, b), lambda g: (g / B, -g * A / (B * B)))


def matmul(a, b):
    A, B = _data(a), _data(b)
    if A.ndim > 2 and B.ndim == 2:
        return _matmul_flat(a, b, A, B)

    def back(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        if B.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb
    return _node(A @ B, (a, b), back)


def _matmul_flat(a, b, A, B):
    # (..., D) @ (D, F) as one 2-D product instead of a batch of small ones
    A2 = A.reshape(-1, A.shape[-1])

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ B.T).reshape(A.shape), A2.T @ g2
    return _node((A2 @ B).reshape(A.shape[:-1] + (B.shape[1],)), (a, b), back)


def exp(a):
    out = np.exp(_data(a))
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    A = _data(a)
    return _node(np.log(A), (a,), lambda g: (g / A,))


def sqrt(a):
    out = np.sqrt(_data(a))
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * _data(a)))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    A = _data(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * A))
    return _node(np.logaddexp(0.0, A), (a,), lambda g: (g * s,))


def silu(a):
    A = _data(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * A))
    return _node(A * s, (a,), lambda g: (g * (s + A * s * (1.0 - s)),))


def gelu(a):
    """tanh approximation."""
    A = _data(a)
    c = np.sqrt(2.0 / np.pi).astype(A.dtype)
    u = c * (A + 0.044715 * A ** 3)
    th = np.tanh(u)
    out = 0.5 * A * (1.0 + th)

    def back(g):
        du = c * (1.0 + 3 * 0.044715 * A ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * A * (1.0 - th ** 2) * du),)
    return _node(out, (a,), back)


def sum_(a, axis=None, keepdims=False):
    A = _data(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, A.shape).copy(),)
    return _node(A.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    A = _data(a)
    n = A.size if axis is None else int(np.prod([A.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    A = _data(a)
    return _node(A.reshape(shape), (a,), lambda g: (g.reshape(A.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(_data(a).transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int):
    arrays = [_data(t) for t in tensors]
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return _node(np.concatenate(arrays, axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_last(a, start: int, stop: int):
    A = _data(a)

    def back(g):
        full = np.zeros_like(A)
        full[..., start:stop] = g
        return (full,)
    return _node(A[..., start:stop], (a,), back)


def embedding(weight, ids: np.ndarray):
    W = _data(weight)

    flat = ids.reshape(-1)
    order = np.argsort(flat, kind="stable")
    uniq, starts = np.unique(flat[order], return_index=True)

    def back(g):
        gw = np.zeros_like(W)
        gw[uniq] = np.add.reduceat(g.reshape(-1, W.shape[1])[order], starts, axis=0)
        return (gw,)
    return _node(W[ids], (weight,), back)


# ---------------------------------------------------------------------------
# fused ops with hand-written backward rules

def softmax(a, axis: int = -1):
    A = _data(a)
    z = np.exp(A - A.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def masked_softmax(a, mask: np.ndarray, axis: int = -1):
    """Softmax with inadmissible entries (``mask == False``) pinned to exactly zero."""
    A = np.where(mask, _data(a), -np.inf)
    z = np.exp(A - A.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def rmsnorm(x, scale, eps: float = 1e-6):
    X, S = _data(x), _data(scale)
    r = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
    xh = X * r

    def back(g):
        gs = (g * xh).reshape(-1, X.shape[-1]).sum(axis=0)
        gxh = g * S
        gx = r * (gxh - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx, gs
    return _node(xh * S, (x, scale), back)


def layernorm(x, scale, bias, eps: float = 1e-5):
    X, S = _data(x), _data(scale)
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    r = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * r

    def back(g):
        flat = g.reshape(-1, X.shape[-1])
        gs = (flat * xh.reshape(flat.shape)).sum(axis=0)
        gb = flat.sum(axis=0)
        gxh = g * S
        gx = r * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx, gs, gb
    return _node(xh * S + _data(bias), (x, scale, bias), back)


def rope(x, cos: np.ndarray, sin: np.ndarray):
    """Rotary encoding with constant tables; backward is the inverse rotation."""
    return _node(rope_apply(_data(x), cos, sin), (x,), lambda g: (rope_apply(g, cos, -sin),))


def causal_conv(x, kernel):
    """Depthwise causal convolution: ``y_t = sum_i kernel[i] * x_{t-i}``; kernel ``(K, D)``."""
    X, W = _data(x), _data(kernel)
    K, T = W.shape[0], X.shape[1]
    y = np.zeros_like(X)
    for i in range(min(K, T)):
        y[:, i:] += X[:, : T - i] * W[i]

    def back(g):
        gx = np.zeros_like(X)
        gw = np.zeros_like(W)
        for i in range(min(K, T)):
            gx[:, : T - i] += g[:, i:] * W[i]
            gw[i] = (g[:, i:] * X[:, : T - i]).reshape(-1, X.shape[-1]).sum(axis=0)
        return gx, gw
    return _node(y, (x, kernel), back)


def recurrence(a, b):
    """``h_t = a_t h_{t-1} + b_t`` along axis 1 with ``h_0 = 0``."""
    A, Bv = _data(a), _data(b)
    h = linear_recurrence(A, Bv)

    def back(g):
        T = Bv.shape[1]
        gb = np.empty_like(Bv)
        carry = np.zeros_like(Bv[:, 0])
        for t in reversed(range(T)):
            carry = g[:, t] + (A[:, t + 1] * carry if t + 1 < T else 0.0)
            gb[:, t] = carry
        ga = np.zeros_like(A)
        ga[:, 1:] = gb[:, 1:] * h[:, :-1]
        return ga, gb
    return _node(h, (a, b), back)


def latte_mix(qprob, klogits, v, unroll: int = 32):
    """Causal Latte mixing on per-head tensors; see :func:`latte.core.latte_scan_kernel`."""
    Q, K, V = _data(qprob), _data(klogits), _data(v)
    out, checkpoints = core.latte_scan_kernel(Q, K, V, unroll, return_checkpoints=True)

    def back(g):
        return core.latte_scan_backward(Q, K, V, g, checkpoints, unroll)
    return _node(out, (qprob, klogits, v), back)


def cross_entropy(logits, targets: np.ndarray, mask: np.ndarray | None = None):
    """Mean next-token cross-entropy over positions where ``mask`` is true (all if None).

    A fully masked batch gives loss 0 and zero gradients.
    """
    Z = _data(logits)
    m = np.ones(targets.shape, dtype=bool) if mask is None else mask.astype(bool)
    n = int(m.sum())
    shifted = Z - Z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    safe_t = np.where(m, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * m).sum() / max(n, 1)

    def back(g):
        if n == 0:
            return (np.zeros_like(Z),)
        p = np.exp(logp)
        onehot = np.zeros_like(Z)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (m[..., None] * (g / n)),)
    return _node(np.asarray(loss, dtype=Z.dtype), (logits,), back)
