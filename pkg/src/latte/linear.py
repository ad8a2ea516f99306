"""Vanilla linear attention and its undirected latent-variable reading.

The feature map is ``phi(u) = exp(u @ P)`` applied per head, so every potential
is strictly positive and the quadratic weights can be read as ``p(s | t)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, split_heads, merge_heads

# Largest |logit| accepted by the unshifted recursion before exp overflows the accumulators.
UNSHIFTED_LOGIT_LIMIT = {np.dtype(np.float32): 30.0, np.dtype(np.float64): 300.0}


@dataclass
class FeatureMap:
    projection: np.ndarray  # (d_head, L)
    mode: str = "exp_projection"

    def __post_init__(self):
        if self.mode != "exp_projection":
            raise ValueError(f"unsupported feature map {self.mode!r}")

    @property
    def n_features(self) -> int:
        return self.projection.shape[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.projection


def feature_map_apply(x: np.ndarray, fm: FeatureMap, shift: bool = False) -> np.ndarray:
    """``exp(x @ P)``; with ``shift`` each vector is divided by its largest entry."""
    z = fm.logits(np.asarray(x))
    if shift:
        z = z - z.max(axis=-1, keepdims=True)
    return np.exp(z)


def _potentials(x, params: AttentionParams, fm: FeatureMap):
    H = params.heads
    q = split_heads(x @ params.W_q, H)
    k = split_heads(x @ params.W_k, H)
    v = split_heads(x @ params.W_v, H)
    if q.shape[-1] != fm.projection.shape[0]:
        raise ValueError("feature map projection does not match the per-head width")
    return q, k, v


def linear_attention_direct(x: np.ndarray, params: AttentionParams, fm: FeatureMap):
    """Quadratic form: explicit weights ``phi(q_t).phi(k_s) / sum_{s'<=t} ...``."""
    x = np.asarray(x)
    q, k, v = _potentials(x, params, fm)
    phq = feature_map_apply(q, fm, shift=True)
    phk = feature_map_apply(k, fm)
    T = x.shape[1]
    scores = (phq @ np.swapaxes(phk, -1, -2)) * np.tril(np.ones((T, T), dtype=x.dtype))
    denom = scores.sum(axis=-1, keepdims=True)
    if np.any(denom <= 0) or not np.all(np.isfinite(denom)):
        raise FloatingPointError("degenerate normalization in linear attention")
    weights = scores / denom
    return merge_heads(weights @ v), weights


@dataclass
class LinearAttnState:
    S: np.ndarray  # (B, H, dv, L)
    z: np.ndarray  # (B, H, L)
    t: int = 0

    @classmethod
    def empty(cls, batch: int, heads: int, dv: int, n_features: int, dtype=np.float64):
        return cls(np.zeros((batch, heads, dv, n_features), dtype=dtype),
                   np.zeros((batch, heads, n_features), dtype=dtype))


def _check_unshifted_range(*logits: np.ndarray):
    dtype = logits[0].dtype
    limit = UNSHIFTED_LOGIT_LIMIT.get(np.dtype(dtype), 30.0)
    worst = max(float(np.abs(z).max()) for z in logits)
    if worst > limit:
        raise FloatingPointError(
            f"feature logits reach {worst:.1f} > {limit} for {np.dtype(dtype).name}; "
            "the unshifted recursion would overflow, use latte.core.latte_causal_scan instead")


def linear_attention_step(state: LinearAttnState, q_t, k_t, v_t, fm: FeatureMap):
    """One recurrence step on per-head projections ``q_t, k_t: (B,H,d)``, ``v_t: (B,H,dv)``."""
    zq, zk = fm.logits(q_t), fm.logits(k_t)
    _check_unshifted_range(zq, zk)
    phq, phk = np.exp(zq), np.exp(zk)
    S = state.S + v_t[..., :, None] * phk[..., None, :]
    z = state.z + phk
    num = (S @ phq[..., :, None])[..., 0]
    den = (phq * z).sum(axis=-1, keepdims=True)
    if np.any(den <= 0):
        raise FloatingPointError("degenerate normalization in linear attention")
    return LinearAttnState(S, z, state.t + 1), num / den


def linear_attention_recurrent(x: np.ndarray, params: AttentionParams, fm: FeatureMap) -> np.ndarray:
    """O(T) form carrying ``S_t = S_{t-1} + v_t phi(k_t)^T`` and ``z_t = z_{t-1} + phi(k_t)``."""
    x = np.asarray(x)
    q, k, v = _potentials(x, params, fm)
    _check_unshifted_range(fm.logits(q), fm.logits(k))
    B, H, T, dv = v.shape
    state = LinearAttnState.empty(B, H, dv, fm.n_features, x.dtype)
    out = np.empty_like(v)
    for t in range(T):
        state, out[:, :, t] = linear_attention_step(state, q[:, :, t], k[:, :, t], v[:, :, t], fm)
    return merge_heads(out)


def undirected_attention_probs(x: np.ndarray, params: AttentionParams, fm: FeatureMap) -> np.ndarray:
    """``p(s|t)`` from the joint ``p(s, l, t) ~ psi(s, l) psi(l, t)`` restricted to ``s <= t``.

    Materializes the (T, T, L) joint and marginalizes the latent last, so it
    shares no intermediate with :func:`linear_attention_direct`.
    """
    x = np.asarray(x)
    q, k, _ = _potentials(x, params, fm)
    psi_lt = feature_map_apply(q, fm)  # psi(l, t), (B, H, T, L)
    psi_sl = feature_map_apply(k, fm)  # psi(s, l), (B, H, T, L)
    T = x.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    joint = psi_lt[:, :, :, None, :] * psi_sl[:, :, None, :, :]  # [b, h, t, s, l]
    joint = np.where(causal[None, None, :, :, None], joint, 0.0)
    Z = joint.sum(axis=(-2, -1))
    return joint.sum(axis=-1) / Z[..., None]
