"""Latte-Macchiato: sliding-window attention as latent state 0, Latte as states 1..L.

``p(l|t)`` is a softmax over ``L/H + 1`` logits per head: one extra gate row
for the window branch followed by the Latte query logits. Both branches read
the same values ``v_s = x_s W_v``.

Query/key features ``y`` for the Latte branch come from one of three sources:
the raw input (``direct``), a causal 1-D convolution (``conv``) or a real-gated
linear recurrence (``rglru``). The window branch always reads the raw input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, sliding_window_attention
from .core import LatteParams, latte_scan_kernel, per_head
from .numerics import softmax

RGLRU_SHARPNESS = 8.0


@dataclass
class RGLRUParams:
    W_input_gate: np.ndarray  # (D, D)
    W_rec_gate: np.ndarray    # (D, D)
    log_decay: np.ndarray     # (D,), decay base is sigmoid(log_decay)
    sharpness_c: float = RGLRU_SHARPNESS

    @classmethod
    def random(cls, rng: np.random.Generator, d_model: int, dtype=np.float64, a_min=0.9, a_max=0.999):
        std = 1.0 / np.sqrt(d_model)
        # base decays spread so that sigmoid(log_decay)**c lands in [a_min, a_max]
        a = rng.uniform(a_min ** (1 / RGLRU_SHARPNESS), a_max ** (1 / RGLRU_SHARPNESS), d_model)
        return cls(rng.normal(0, std, (d_model, d_model)).astype(dtype),
                   rng.normal(0, std, (d_model, d_model)).astype(dtype),
                   np.log(a / (1 - a)).astype(dtype))


@dataclass
class MacchiatoParams:
    latte: LatteParams
    gate_row_0: np.ndarray        # (D, H): one extra query-side logit per head
    swa: AttentionParams          # q/k projections of the window branch; its W_v is unused when sharing
    window: int = 128
    feature_mode: str = "direct"  # "direct" | "conv" | "rglru"
    conv_kernel: np.ndarray | None = None  # (K, D) depthwise or (K, D, D) full
    rglru: RGLRUParams | None = None
    use_rope_in_swa: bool = True
    share_values: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.feature_mode not in ("direct", "conv", "rglru"):
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")
        if self.feature_mode == "conv" and (self.conv_kernel is None or self.conv_kernel.shape[0] < 1):
            raise ValueError("conv feature mode needs a kernel with K >= 1 taps")
        if self.feature_mode == "rglru" and self.rglru is None:
            raise ValueError("rglru feature mode needs RGLRUParams")
        if self.gate_row_0.shape != (self.latte.W_q.shape[0], self.latte.heads):
            raise ValueError("gate_row_0 must have shape (D, heads)")
        if self.swa.heads != self.latte.heads:
            raise ValueError("window and latent branches must use the same number of heads")

    @property
    def heads(self) -> int:
        return self.latte.heads

    def value_params(self) -> AttentionParams:
        W_v = self.latte.W_v if self.share_values else self.swa.W_v
        return AttentionParams(self.swa.W_q, self.swa.W_k, W_v, heads=self.heads, scale=self.swa.scale)

    @classmethod
    def random(cls, rng: np.random.Generator, d_model: int, n_latents: int, heads: int = 1, window: int = 8,
               feature_mode: str = "direct", conv_size: int = 3, depthwise: bool = True,
               dtype=np.float64, use_rope_in_swa: bool = True) -> "MacchiatoParams":
        std = 1.0 / np.sqrt(d_model)
        latte = LatteParams.random(rng, d_model, n_latents, heads=heads, dtype=dtype)
        swa = AttentionParams.random(rng, d_model, d_model, heads=heads, dtype=dtype)
        gate = rng.normal(0, std, (d_model, heads)).astype(dtype)
        kernel = rglru = None
        if feature_mode == "conv":
            shape = (conv_size, d_model) if depthwise else (conv_size, d_model, d_model)
            kernel = rng.normal(0, 1.0 / np.sqrt(conv_size), shape).astype(dtype)
        elif feature_mode == "rglru":
            rglru = RGLRUParams.random(rng, d_model, dtype)
        return cls(latte, gate, swa, window, feature_mode, kernel, rglru, use_rope_in_swa)


# ---------------------------------------------------------------------------
# feature parameterisations

def conv_features(x: np.ndarray, kernel: np.ndarray, K: int | None = None) -> np.ndarray:
    """Causal convolution ``y_t = sum_{i<K} w_i x_{t-i}`` with left zero padding.

    A ``(K, D)`` kernel acts per channel; a ``(K, D, D)`` kernel mixes channels
    as ``x_{t-i} @ w_i``.
    """
    x = np.asarray(x)
    K = kernel.shape[0] if K is None else K
    if K < 1 or kernel.shape[0] != K:
        raise ValueError("kernel must have K >= 1 taps")
    T = x.shape[1]
    y = np.zeros(x.shape[:2] + (kernel.shape[-1],), dtype=np.result_type(x, kernel))
    for i in range(min(K, T)):
        shifted = x[:, : T - i]
        y[:, i:] += shifted * kernel[i] if kernel.ndim == 2 else shifted @ kernel[i]
    return y


def linear_recurrence(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """``h_t = a_t * h_{t-1} + b_t`` along axis 1, starting from ``h0`` (zeros by default)."""
    h = np.zeros_like(b[:, 0]) if h0 is None else h0
    out = np.empty_like(b)
    for t in range(b.shape[1]):
        h = a[:, t] * h + b[:, t]
        out[:, t] = h
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def rglru_gates(x: np.ndarray, params: RGLRUParams):
    """Per-step decay ``a_t``, input scale ``sqrt(1 - a_t^2)`` and gated input ``i_t * x_t``."""
    r = _sigmoid(x @ params.W_rec_gate)
    i = _sigmoid(x @ params.W_input_gate)
    # log a_t = c * r_t * log sigmoid(Lambda) = -c * r_t * softplus(-Lambda)
    log_a = -params.sharpness_c * r * np.logaddexp(0.0, -params.log_decay)
    a = np.exp(log_a)
    scale = np.sqrt(-np.expm1(2.0 * log_a))
    return a, scale, i * x


def rglru_features(x: np.ndarray, params: RGLRUParams) -> np.ndarray:
    x = np.asarray(x)
    a, scale, gated = rglru_gates(x, params)
    return linear_recurrence(a, scale * gated)


def features(x: np.ndarray, params: MacchiatoParams) -> np.ndarray:
    if params.feature_mode == "conv":
        return conv_features(x, params.conv_kernel)
    if params.feature_mode == "rglru":
        return rglru_features(x, params.rglru)
    return x


# ---------------------------------------------------------------------------
# mixture

def gate_logits(y: np.ndarray, params: MacchiatoParams) -> np.ndarray:
    """``(B, T, H, Lh + 1)``: window logit first, then the Latte query logits."""
    l0 = (y @ params.gate_row_0)[..., None]
    lq = per_head(y @ params.latte.W_q, params.heads)
    return np.concatenate([l0, lq], axis=-1)


def mixture_gate(y: np.ndarray, params: MacchiatoParams) -> np.ndarray:
    """``p(l|t)`` over the ``Lh + 1`` states of each head, as ``(B, H, T, Lh + 1)``."""
    return softmax(gate_logits(np.asarray(y), params), axis=-1).transpose(0, 2, 1, 3)


def macchiato_forward(x: np.ndarray, params: MacchiatoParams, return_trace: bool = False, unroll: int = 32):
    """Mixture output; with ``return_trace`` also the combined ``(B, H, T, T)`` attention matrix."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"expected a non-empty (B, T, D) batch, got shape {x.shape}")
    B, T, _ = x.shape
    H = params.heads
    y = features(x, params)
    gate = softmax(gate_logits(y, params), axis=-1)  # (B, T, H, Lh+1)
    p0 = gate[..., 0]
    swa_out, swa_probs = sliding_window_attention(x, params.value_params(), params.window,
                                                  use_rope=params.use_rope_in_swa, return_probs=return_trace)
    Lh = params.latte.latents_per_head
    if Lh == 0:
        out = per_head(swa_out, H) * p0[..., None]
        out = out.reshape(B, T, -1)
        return (out, swa_probs * p0.transpose(0, 2, 1)[..., None]) if return_trace else (out, None)

    kl = per_head(y @ params.latte.W_k, H)
    v = per_head(x @ params.value_params().W_v, H)
    latent_out = latte_scan_kernel(gate[..., 1:], kl, v, unroll)
    out = (p0[..., None] * per_head(swa_out, H) + latent_out).reshape(B, T, -1)
    if not return_trace:
        return out, None

    # combined matrix: p(0|t) p0(s|t) + sum_l p(l|t) p(s|l,t)
    klh = kl.transpose(0, 2, 1, 3)  # (B, H, T, Lh)
    k_sh = np.exp(klh - klh.max(axis=2, keepdims=True))
    causal = np.tril(np.ones((T, T), dtype=bool))
    num = np.where(causal[None, None, :, :, None], k_sh[:, :, None, :, :], 0.0)
    p_slt = num / num.sum(axis=3, keepdims=True)
    g = gate.transpose(0, 2, 1, 3)
    probs = g[..., 0][..., None] * swa_probs + np.einsum("bhtsl,bhtl->bhts", p_slt, g[..., 1:])
    return out, probs


def macchiato_params_without_latents(params: MacchiatoParams) -> MacchiatoParams:
    """Same window branch and gate row, zero latent slots."""
    D = params.latte.W_q.shape[0]
    empty = np.zeros((D, 0), dtype=params.latte.W_q.dtype)
    latte = LatteParams(empty, empty.copy(), params.latte.W_v, heads=params.heads)
    return MacchiatoParams(latte, params.gate_row_0, params.swa, params.window, params.feature_mode,
                           params.conv_kernel, params.rglru, params.use_rope_in_swa, params.share_values)
