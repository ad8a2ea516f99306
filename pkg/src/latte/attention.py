"""Reference softmax attention, sliding-window attention and rotary encoding.

All inputs are ``(B, T, D)`` arrays; per-head attention matrices are returned
as ``(B, H, T, T)`` arrays whose masked entries are exactly zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import softmax

CAUSAL = "causal"
BIDIRECTIONAL = "bidirectional"


@dataclass(frozen=True)
class Window:
    w: int

    def __post_init__(self):
        if self.w < 1:
            raise ValueError("window size must be >= 1")


@dataclass
class AttentionParams:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    heads: int = 1
    scale: bool = True

    def __post_init__(self):
        D, Dp = self.W_q.shape
        if self.W_k.shape != (D, Dp) or self.W_v.shape[0] != D:
            raise ValueError("W_q, W_k, W_v shapes are inconsistent")
        if self.heads < 1 or Dp % self.heads or self.W_v.shape[1] % self.heads:
            raise ValueError(f"heads={self.heads} must divide the projection widths")

    @classmethod
    def random(cls, rng: np.random.Generator, d_model: int, d_proj: int, heads: int = 1,
               dtype=np.float64, std: float | None = None, scale: bool = True) -> "AttentionParams":
        std = 1.0 / np.sqrt(d_model) if std is None else std
        mats = [rng.normal(0.0, std, (d_model, d_proj)).astype(dtype) for _ in range(3)]
        return cls(*mats, heads=heads, scale=scale)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(B, T, H*d) -> (B, H, T, d)."""
    B, T, F = x.shape
    return x.reshape(B, T, heads, F // heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(B, H, T, d) -> (B, T, H*d)."""
    B, H, T, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * d)


def mask_matrix(T: int, mode) -> np.ndarray:
    """Boolean admissibility matrix ``M[t, s]`` for the given mask mode."""
    t = np.arange(T)[:, None]
    s = np.arange(T)[None, :]
    if mode == BIDIRECTIONAL:
        return np.ones((T, T), dtype=bool)
    if mode == CAUSAL:
        return s <= t
    if isinstance(mode, Window):
        # lower bound clamped at the first position: early rows see shorter windows
        return (s <= t) & (s >= t - mode.w)
    raise ValueError(f"unknown mask mode {mode!r}")


def rope_encode(x: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate feature pairs (2i, 2i+1) of ``x[..., T, d]`` by ``pos * base**(-2i/d)``."""
    x = np.asarray(x)
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"rotary encoding needs an even feature width, got {d}")
    cos, sin = rope_tables(positions, d, base, x.dtype)
    return rope_apply(x, cos, sin)


def rope_tables(positions, d: int, base: float = 10000.0, dtype=np.float64):
    pos = np.asarray(positions, dtype=np.float64)
    theta = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos[:, None] * theta[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def _project(x: np.ndarray, params: AttentionParams, use_rope: bool):
    H = params.heads
    q = split_heads(x @ params.W_q, H)
    k = split_heads(x @ params.W_k, H)
    v = split_heads(x @ params.W_v, H)
    if use_rope:
        pos = np.arange(x.shape[1])
        q = rope_encode(q, pos)
        k = rope_encode(k, pos)
    return q, k, v


def masked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, scale: bool = True):
    """Attention on pre-split heads. Returns ``(out[B,H,T,dv], probs[B,H,T,T])``."""
    logits = q @ np.swapaxes(k, -1, -2)
    if scale:
        logits = logits / np.sqrt(q.shape[-1]).astype(q.dtype)
    logits = np.where(mask, logits, -np.inf)
    probs = softmax(logits, axis=-1)
    probs = np.where(mask, probs, 0.0).astype(q.dtype)
    return probs @ v, probs


def softmax_attention(x: np.ndarray, params: AttentionParams, mask=CAUSAL, use_rope: bool = False):
    if mask not in (CAUSAL, BIDIRECTIONAL):
        raise ValueError("softmax_attention takes a causal or bidirectional mask; use sliding_window_attention")
    x = _check_batch(x, params)
    q, k, v = _project(x, params, use_rope)
    out, probs = masked_attention(q, k, v, mask_matrix(x.shape[1], mask), params.scale)
    return merge_heads(out), probs


def sliding_window_attention(x: np.ndarray, params: AttentionParams, w: int, use_rope: bool = True,
                             return_probs: bool = True):
    """Causal attention over positions ``max(0, t-w) .. t`` (up to w+1 tokens).

    With ``return_probs=False`` the (T, T) matrix is never built and the
    second return value is None; cost is then linear in T for fixed ``w``.
    """
    x = _check_batch(x, params)
    q, k, v = _project(x, params, use_rope)
    if not return_probs:
        return merge_heads(blocked_causal_attention(q, k, v, w, params.scale)), None
    out, probs = masked_attention(q, k, v, mask_matrix(x.shape[1], Window(w)), params.scale)
    return merge_heads(out), probs


def blocked_causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, window: int | None = None,
                             scale: bool = True, block: int = 128) -> np.ndarray:
    """Causal (optionally windowed) attention on pre-split heads without a (T, T) matrix.

    Queries are processed ``block`` rows at a time against the keys they can
    see, so memory is ``O(block * T)`` for full attention and
    ``O(block * (block + w))`` with a window. Matches :func:`masked_attention`.
    """
    T = q.shape[-2]
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=np.result_type(q, v))
    inv = 1.0 / np.sqrt(q.shape[-1]) if scale else 1.0
    for q0 in range(0, T, block):
        q1 = min(T, q0 + block)
        k0 = 0 if window is None else max(0, q0 - window)
        t = np.arange(q0, q1)[:, None]
        s = np.arange(k0, q1)[None, :]
        mask = s <= t
        if window is not None:
            mask &= s >= t - window
        logits = (q[..., q0:q1, :] @ np.swapaxes(k[..., k0:q1, :], -1, -2)) * q.dtype.type(inv)
        logits = np.where(mask, logits, -np.inf)
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        out[..., q0:q1, :] = p @ v[..., k0:q1, :]
    return out


def _check_batch(x, params: AttentionParams) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected a (B, T, D) batch, got shape {x.shape}")
    if x.shape[1] < 1:
        raise ValueError("sequence length must be >= 1")
    if x.shape[2] != params.W_q.shape[0]:
        raise ValueError(f"input width {x.shape[2]} does not match parameters ({params.W_q.shape[0]})")
    return x
