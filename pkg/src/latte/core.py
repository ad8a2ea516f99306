"""Directed latent-variable linear attention (Latte).

Every token ``t`` picks a mixture over ``L`` latent slots, ``p(l|t)``, and each
slot summarizes the prefix through ``p(s|l,t)``, a softmax of key logits over
``s <= t``. The causal form is a left-to-right scan over running sums kept
relative to the running maximum key logit, which makes it a recurrent model
with an ``O(L * Dv)`` state per head.

Layout conventions: ``x`` is ``(B, T, D)``; per-head query probabilities and key
logits are ``(B, T, H, L/H)``; per-head values are ``(B, T, H, Dv/H)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import cumulative_max, softmax

BRUTEFORCE_MAX_T = 4096


@dataclass
class LatteParams:
    W_q: np.ndarray  # (D, L), columns are the query-side latent vectors
    W_k: np.ndarray  # (D, L), columns are the key-side latent vectors
    W_v: np.ndarray  # (D, Dv)
    heads: int = 1

    def __post_init__(self):
        D, L = self.W_q.shape
        if self.W_k.shape != (D, L) or self.W_v.shape[0] != D:
            raise ValueError("W_q, W_k, W_v shapes are inconsistent")
        if self.heads < 1 or L % self.heads or self.W_v.shape[1] % self.heads:
            raise ValueError(f"heads={self.heads} must divide L={L} and Dv={self.W_v.shape[1]}")

    @property
    def n_latents(self) -> int:
        return self.W_q.shape[1]

    @property
    def latents_per_head(self) -> int:
        return self.W_q.shape[1] // self.heads

    @classmethod
    def random(cls, rng: np.random.Generator, d_model: int, n_latents: int, d_value: int | None = None,
               heads: int = 1, dtype=np.float64, std: float | None = None) -> "LatteParams":
        d_value = d_model if d_value is None else d_value
        std = 1.0 / np.sqrt(d_model) if std is None else std
        return cls(rng.normal(0, std, (d_model, n_latents)).astype(dtype),
                   rng.normal(0, std, (d_model, n_latents)).astype(dtype),
                   rng.normal(0, std, (d_model, d_value)).astype(dtype),
                   heads=heads)


@dataclass
class LatteState:
    """Streaming state in running-max-shifted form; ``running_max`` is None before the first token."""
    alpha_shifted: np.ndarray   # (B, H, Lh)
    vtilde_shifted: np.ndarray  # (B, H, Lh, Dh)
    running_max: np.ndarray | None
    t: int = 0

    @classmethod
    def empty(cls, batch: int, params: LatteParams, dtype=None) -> "LatteState":
        """Zero state; ``dtype`` defaults to the parameters' dtype."""
        dtype = params.W_v.dtype if dtype is None else dtype
        H = params.heads
        Lh = params.latents_per_head
        Dh = params.W_v.shape[1] // H
        return cls(np.zeros((batch, H, Lh), dtype=dtype), np.zeros((batch, H, Lh, Dh), dtype=dtype), None, 0)


@dataclass
class LatteTrace:
    """Intermediates of the causal oracle; head axis kept explicit: ``[B, H, T, ...]``."""
    psi_q: np.ndarray   # exp(query logits), (B, H, T, Lh)
    psi_k: np.ndarray   # exp(key logits), (B, H, T, Lh)
    beta: np.ndarray    # (B, H, T)
    alpha: np.ndarray   # (B, H, T, Lh)
    gamma: np.ndarray   # (B, H, T, Lh)
    vtilde: np.ndarray  # (B, H, T, Lh, Dh)
    probs: np.ndarray   # (B, H, T, T)


def _check_input(x, params: LatteParams) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected a (B, T, D) batch, got shape {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("empty sequence: Latte distributions need at least one token")
    if x.shape[2] != params.W_q.shape[0]:
        raise ValueError(f"input width {x.shape[2]} does not match parameters ({params.W_q.shape[0]})")
    return x


def per_head(a: np.ndarray, heads: int) -> np.ndarray:
    """(B, T, F) -> (B, T, H, F/H)."""
    B, T, F = a.shape
    return a.reshape(B, T, heads, F // heads)


def project(x: np.ndarray, params: LatteParams):
    """Query logits, key logits and values, each split per head.

    Uses ``einsum`` rather than BLAS so every row is computed the same way
    whatever the batch shape; this is what lets :func:`latte_step` match the
    scan bit for bit.
    """
    H = params.heads
    return tuple(per_head(np.einsum("btd,df->btf", x, W), H) for W in (params.W_q, params.W_k, params.W_v))


# ---------------------------------------------------------------------------
# bidirectional

def latte_bidirectional(x: np.ndarray, params: LatteParams, return_trace: bool = False):
    """Non-causal Latte: two (T x L) contractions, never a (T x T) product.

    With ``return_trace`` the implied attention matrix ``sum_l p(l|t) p(s|l)`` is
    materialized as ``(B, H, T, T)`` alongside the two factors.
    """
    x = _check_input(x, params)
    ql, kl, v = project(x, params)
    p_lt = softmax(ql, axis=-1)              # p(l|t)
    p_sl = softmax(kl, axis=1)               # p(s|l), normalized over the whole sequence
    summary = np.einsum("bshl,bshd->bhld", p_sl, v)
    out = np.einsum("bthl,bhld->bthd", p_lt, summary)
    B, T = x.shape[:2]
    out = out.reshape(B, T, -1)
    if not return_trace:
        return out, None
    probs = np.einsum("bthl,bshl->bhts", p_lt, p_sl)
    return out, {"p_l_given_t": p_lt.transpose(0, 2, 1, 3), "p_s_given_l": p_sl.transpose(0, 2, 1, 3),
                 "probs": probs}


# ---------------------------------------------------------------------------
# causal oracle

def latte_causal_bruteforce(x: np.ndarray, params: LatteParams):
    """Materialize ``a_ts = sum_l p(s|l,t) p(l|t)`` in float64 and apply it to the values."""
    x = _check_input(x, params)
    T = x.shape[1]
    if T > BRUTEFORCE_MAX_T:
        raise ValueError(f"brute-force oracle limited to T <= {BRUTEFORCE_MAX_T}, got {T}")
    x64 = x.astype(np.float64)
    p64 = LatteParams(*(w.astype(np.float64) for w in (params.W_q, params.W_k, params.W_v)), heads=params.heads)
    ql, kl, v = (a.transpose(0, 2, 1, 3) for a in project(x64, p64))  # (B, H, T, .)

    # constant shifts cancel inside each normalized factor
    q_sh = np.exp(ql - ql.max(axis=-1, keepdims=True))
    k_sh = np.exp(kl - kl.max(axis=2, keepdims=True))
    p_lt = q_sh / q_sh.sum(axis=-1, keepdims=True)
    causal = np.tril(np.ones((T, T), dtype=bool))
    # p(s|l,t): [b, h, t, s, l]
    num = np.where(causal[None, None, :, :, None], k_sh[:, :, None, :, :], 0.0)
    p_slt = num / num.sum(axis=3, keepdims=True)
    probs = np.einsum("bhtsl,bhtl->bhts", p_slt, p_lt)
    out = probs @ v

    with np.errstate(over="ignore", invalid="ignore"):
        psi_q, psi_k = np.exp(ql), np.exp(kl)
        beta = psi_q.sum(axis=-1)
        alpha = np.cumsum(psi_k, axis=2)
        gamma = psi_q / (beta[..., None] * alpha)
        vtilde = np.cumsum(psi_k[..., None] * v[:, :, :, None, :], axis=2)
    trace = LatteTrace(psi_q, psi_k, beta, alpha, gamma, vtilde, probs)
    B = x.shape[0]
    return out.transpose(0, 2, 1, 3).reshape(B, T, -1), trace


def latte_causal_unshifted(x: np.ndarray, params: LatteParams, return_overflow: bool = False):
    """Textbook recursion on raw exponentials, no running-max shift.

    Kept as a faithful baseline and as the fault-injection path: it overflows
    once query and key logits jointly exceed the dtype's exponent range. With
    ``return_overflow`` also returns how many accumulator or normalizer entries
    became non-finite (the output itself can stay finite but wrong, e.g. when
    ``beta * alpha`` overflows and gamma collapses to zero).
    """
    x = _check_input(x, params)
    ql, kl, v = project(x, params)
    B, T, H, Lh = ql.shape
    alpha = np.zeros((B, H, Lh), dtype=x.dtype)
    vtilde = np.zeros((B, H, Lh, v.shape[-1]), dtype=x.dtype)
    out = np.empty_like(v)
    overflow = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(T):
            e_k = np.exp(kl[:, t])
            e_q = np.exp(ql[:, t])
            alpha = alpha + e_k
            vtilde = vtilde + e_k[..., None] * v[:, t, :, None, :]
            beta = e_q.sum(axis=-1, keepdims=True)
            norm = beta * alpha
            gamma = e_q / norm
            out[:, t] = np.einsum("bhl,bhld->bhd", gamma, vtilde)
            if return_overflow:
                overflow += int((~np.isfinite(norm)).sum() + (~np.isfinite(vtilde)).sum())
    out = out.reshape(B, T, -1)
    return (out, overflow) if return_overflow else out


# ---------------------------------------------------------------------------
# stabilized scan

def _scan_segment(q, k, v, m, vt, a, prev_m, t0, t1, out, keep=None):
    """Advance the shifted accumulators over ``t0 <= t < t1`` (one unroll block)."""
    revert = np.exp(np.concatenate([prev_m[:, None], m[:, t0:t1 - 1]], axis=1) - m[:, t0:t1])
    add = np.exp(k[:, t0:t1] - m[:, t0:t1])
    for i, t in enumerate(range(t0, t1)):
        r = revert[:, i]
        e = add[:, i]
        a = a * r + e
        vt = vt * r[..., None] + e[..., None] * v[:, t, :, None, :]
        out[:, t] = np.einsum("bhl,bhld->bhd", q[:, t] / a, vt)
        if keep is not None:
            keep.append((vt, a))
    return vt, a, m[:, t1 - 1]


def latte_scan_kernel(qprob: np.ndarray, klogits: np.ndarray, v: np.ndarray, unroll: int = 32,
                      return_checkpoints: bool = False):
    """Stabilized causal scan on per-head tensors.

    ``qprob`` ``(B,T,H,Lh)`` are the query-side mixture weights (they need not
    sum to one, which lets the hybrid reuse this kernel), ``klogits``
    ``(B,T,H,Lh)`` the key logits and ``v`` ``(B,T,H,Dh)`` the values. Returns
    ``out[b,t,h] = sum_l qprob[b,t,h,l] * vtilde_shifted / alpha_shifted``.
    ``unroll`` sets how many steps share one vectorized exp evaluation; it
    never changes the result.
    """
    if unroll < 1:
        raise ValueError("unroll must be >= 1")
    B, T, H, Lh = klogits.shape
    if T == 0:
        raise ValueError("empty sequence")
    Dh = v.shape[-1]
    m = cumulative_max(klogits, 1)
    a = np.zeros((B, H, Lh), dtype=klogits.dtype)
    vt = np.zeros((B, H, Lh, Dh), dtype=klogits.dtype)
    prev_m = klogits[:, 0]
    out = np.empty((B, T, H, Dh), dtype=np.result_type(qprob, v, klogits))
    checkpoints = []
    for t0 in range(0, T, unroll):
        t1 = min(T, t0 + unroll)
        if return_checkpoints:
            checkpoints.append((vt, a, prev_m))
        vt, a, prev_m = _scan_segment(qprob, klogits, v, m, vt, a, prev_m, t0, t1, out)
    if return_checkpoints:
        return out, checkpoints
    return out


def latte_scan_backward(qprob, klogits, v, dout, checkpoints, unroll: int = 32):
    """Reverse pass of :func:`latte_scan_kernel`.

    Intermediates are recomputed one unroll block at a time from the
    checkpoints. The adjoints of the value sums are carried backwards in the
    same running-max frame, decayed by ``exp(m_t - m_{t+1}) <= 1``, so the
    reverse sweep is as overflow-free as the forward one.
    """
    B, T, H, Lh = klogits.shape
    Dh = v.shape[-1]
    m = cumulative_max(klogits, 1)
    dq = np.zeros_like(qprob)
    dk = np.zeros_like(klogits)
    dv = np.zeros_like(v)
    U = np.zeros((B, H, Lh, Dh), dtype=klogits.dtype)
    u = np.zeros((B, H, Lh), dtype=klogits.dtype)
    starts = list(range(0, T, unroll))
    for seg in reversed(range(len(starts))):
        t0 = starts[seg]
        t1 = min(T, t0 + unroll)
        vt, a, prev_m = checkpoints[seg]
        keep = []
        scratch = np.empty((B, T, H, Dh), dtype=dout.dtype)
        _scan_segment(qprob, klogits, v, m, vt, a, prev_m, t0, t1, scratch, keep)
        e = np.exp(klogits[:, t0:t1] - m[:, t0:t1])
        for i in reversed(range(t1 - t0)):
            t = t0 + i
            vt_t, a_t = keep[i]
            R = vt_t / a_t[..., None]
            go = dout[:, t]
            dq[:, t] = np.einsum("bhd,bhld->bhl", go, R)
            gR = qprob[:, t][..., None] * go[:, :, None, :]
            if t + 1 < T:
                decay = np.exp(m[:, t] - m[:, t + 1])
                U = U * decay[..., None]
                u = u * decay
            U = U + gR / a_t[..., None]
            u = u + (gR * R).sum(axis=-1) / a_t
            e_t = e[:, i]
            dv[:, t] = np.einsum("bhl,bhld->bhd", e_t, U)
            dk[:, t] = e_t * (np.einsum("bhd,bhld->bhl", v[:, t], U) - u)
    return dq, dk, dv


def latte_causal_scan(x: np.ndarray, params: LatteParams, unroll: int = 32, stabilize: bool = True) -> np.ndarray:
    """Causal Latte in one left-to-right pass with running-max stabilization.

    ``stabilize=False`` routes to :func:`latte_causal_unshifted` (fault injection).
    """
    if not stabilize:
        return latte_causal_unshifted(x, params)
    x = _check_input(x, params)
    ql, kl, v = project(x, params)
    out = latte_scan_kernel(softmax(ql, axis=-1), kl, v, unroll)
    return out.reshape(x.shape[0], x.shape[1], -1)


def latte_step(state: LatteState, x_t: np.ndarray, params: LatteParams):
    """Consume one token ``x_t: (B, D)``; returns ``(new_state, out_t: (B, Dv))``.

    Uses the same update order as the scan, so streaming a sequence token by
    token reproduces :func:`latte_causal_scan` bit for bit.
    """
    x_t = np.asarray(x_t)
    if x_t.ndim != 2 or x_t.shape[1] != params.W_q.shape[0]:
        raise ValueError(f"expected x_t of shape (B, {params.W_q.shape[0]}), got {x_t.shape}")
    if x_t.shape[0] != state.alpha_shifted.shape[0]:
        raise ValueError("batch size differs from the state's")
    ql, kl, v = project(x_t[:, None, :], params)
    q = softmax(ql, axis=-1)
    k_t = kl[:, 0]
    prev_m = k_t if state.running_max is None else state.running_max
    m_t = np.maximum(prev_m, k_t)
    m = m_t[:, None]
    out = np.empty((x_t.shape[0], 1) + v.shape[2:], dtype=np.result_type(q, v, kl))
    vt, a, _ = _scan_segment(q, kl, v, m, state.vtilde_shifted, state.alpha_shifted, prev_m, 0, 1, out)
    return LatteState(a, vt, m_t, state.t + 1), out[:, 0].reshape(x_t.shape[0], -1)


def latte_stream(x: np.ndarray, params: LatteParams, state: LatteState | None = None):
    """Feed a whole batch through :func:`latte_step`; returns ``(out, final_state)``."""
    x = _check_input(x, params)
    state = LatteState.empty(x.shape[0], params, x.dtype) if state is None else state
    outs = []
    for t in range(x.shape[1]):
        state, y = latte_step(state, x[:, t], params)
        outs.append(y)
    return np.stack(outs, axis=1), state


# ---------------------------------------------------------------------------
# diagnostics

def usage_entropy(posterior: np.ndarray, axes=(0, 2)) -> np.ndarray:
    """Entropy of the average latent usage, ``H(mean p(l|t))``, per head."""
    usage = posterior.mean(axis=axes)
    usage = usage / usage.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(usage > 0, usage * np.log(usage), 0.0)
    return -terms.sum(axis=-1)


def latent_posterior(x: np.ndarray, params: LatteParams):
    """``p(l|t)`` per head as ``(B, H, T, Lh)`` plus the per-head usage entropy ``(H,)``."""
    x = _check_input(x, params)
    ql = per_head(np.einsum("btd,df->btf", x, params.W_q), params.heads)
    post = softmax(ql, axis=-1).transpose(0, 2, 1, 3)
    return post, usage_entropy(post)
