"""Invariant suite behind ``latte verify``.

Each check returns a measured number and is compared against a tolerance that
depends on the run precision. Failures are collected, never raised, so the
report always covers every check.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import (BIDIRECTIONAL, CAUSAL, AttentionParams, mask_matrix, softmax_attention,
                        sliding_window_attention)
from .core import (LatteParams, latte_bidirectional, latte_causal_bruteforce, latte_causal_scan,
                   latte_causal_unshifted, latte_scan_backward, latte_scan_kernel, latte_stream)
from .linear import FeatureMap, linear_attention_direct, linear_attention_recurrent, undirected_attention_probs
from .macchiato import MacchiatoParams, macchiato_forward, macchiato_params_without_latents
from .numerics import (cumulative_max, finite_difference_gradient, relative_error, resolve_dtype,
                       shifted_exp_cumsum, softmax)

# (f32, f64) tolerances; "le" checks pass when measured <= tol, "ge" when measured >= tol
TOLERANCES = {
    "softmax_row_stochastic": (1e-6, 1e-6),
    "cumulative_max_idempotent": (0.0, 0.0),
    "shifted_cumsum_vs_direct": (1e-5, 1e-12),
    "determinism_bitwise": (0.0, 0.0),
    "attention_causality": (0.0, 0.0),
    "attention_row_stochastic": (1e-6, 1e-10),
    "attention_permutation_equivariance": (1e-5, 1e-12),
    "swa_wide_equals_causal": (1e-6, 1e-6),
    "undirected_equivalence": (1e-5, 1e-10),
    "linear_low_rank": (1e-5, 1e-6),
    "linear_recurrent_vs_direct": (1e-4, 1e-10),
    "linear_row_stochastic": (1e-6, 1e-10),
    "scan_vs_bruteforce": (1e-4, 1e-9),
    "stream_equals_scan_bitwise": (0.0, 0.0),
    "latte_causality": (0.0, 0.0),
    "latte_prefix_permutation": (1e-6, 1e-6),
    "latte_row_stochastic": (1e-10, 1e-10),
    "latte_bidirectional_rank": (1e-6, 1e-6),
    "latte_convex_envelope": (1e-6, 1e-12),
    "scan_backward_vs_fd": (1e-5, 1e-5),
    "stabilized_scan_finite": (1e-4, 1e-4),
    "unshifted_recursion_overflows": (1, 1),
    "macchiato_row_stochastic": (1e-6, 1e-10),
    "macchiato_trace_causal": (0.0, 0.0),
    "macchiato_L0_equals_swa": (0.0, 0.0),
    "macchiato_saturated_gate_equals_attention": (1e-6, 1e-6),
    "macchiato_direct_prefix_permutation": (1e-6, 1e-6),
    "macchiato_conv_breaks_permutation": (95, 95),
    "macchiato_rglru_breaks_permutation": (95, 95),
}
AT_LEAST = {"unshifted_recursion_overflows", "macchiato_conv_breaks_permutation",
            "macchiato_rglru_breaks_permutation"}


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0
    note: str = ""

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"


@dataclass
class VerifyContext:
    dtype: np.dtype
    seed: int
    break_stabilization: bool = False

    def rng(self, offset: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, offset])

    def normal(self, rng, shape, scale=1.0):
        return rng.normal(0.0, scale, shape).astype(self.dtype)


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _row_error(p) -> float:
    return float(np.max(np.abs(np.asarray(p, dtype=np.float64).sum(axis=-1) - 1.0)))


def _perturbed_future_change(fn, x, t, rng) -> float:
    """Largest change of ``fn(x)[:, :t+1]`` when every position after ``t`` is replaced."""
    y = x.copy()
    y[:, t + 1:] = rng.normal(0.0, 3.0, y[:, t + 1:].shape).astype(x.dtype)
    return _max_abs(fn(x)[:, : t + 1], fn(y)[:, : t + 1])


def _permute_prefix(x, t, rng):
    """Shuffle positions ``0 .. t-1`` while keeping ``t`` fixed."""
    y = x.copy()
    perm = rng.permutation(t)
    while t > 1 and np.all(perm == np.arange(t)):
        perm = rng.permutation(t)
    y[:, :t] = x[:, perm]
    return y


# ---------------------------------------------------------------------------
# numerics

def check_softmax_row_stochastic(ctx):
    rng = ctx.rng(1)
    worst = 0.0
    for x in (np.full((4, 9), 1e4), np.full((4, 9), -1e4), rng.uniform(-1e4, 1e4, (16, 9)), rng.normal(size=(16, 9))):
        worst = max(worst, _row_error(softmax(x.astype(ctx.dtype), axis=-1)))
    return worst


def check_cumulative_max_idempotent(ctx):
    x = ctx.normal(ctx.rng(2), (50, 7))
    m = cumulative_max(x, 0)
    return _max_abs(cumulative_max(m, 0), m)


def check_shifted_cumsum_vs_direct(ctx):
    rng = ctx.rng(3)
    logits = ctx.normal(rng, (16, 4), 3.0)
    w = ctx.normal(rng, (16, 5))
    norm, value, m = shifted_exp_cumsum(logits, w)
    e = np.exp(logits.astype(np.float64))
    direct_norm = np.cumsum(e, axis=0)
    direct_value = np.cumsum(e[:, :, None] * w[:, None, :].astype(np.float64), axis=0)
    scale = np.exp(m.astype(np.float64))
    return max(relative_error(scale * norm, direct_norm), relative_error(scale[..., None] * value, direct_value))


def check_determinism(ctx):
    rng = ctx.rng(4)
    x = ctx.normal(rng, (2, 40, 16))
    params = LatteParams.random(rng, 16, 8, heads=2, dtype=ctx.dtype)
    a = latte_causal_scan(x, params)
    b = latte_causal_scan(x.copy(), params)
    return 0.0 if np.array_equal(a, b) else _max_abs(a, b) or float("inf")


# ---------------------------------------------------------------------------
# reference attention

def _attn_setup(ctx, offset, T=24, D=16, heads=2):
    rng = ctx.rng(offset)
    return ctx.normal(rng, (2, T, D)), AttentionParams.random(rng, D, D, heads=heads, dtype=ctx.dtype), rng


def check_attention_causality(ctx):
    x, params, rng = _attn_setup(ctx, 10)
    worst = 0.0
    for t in (0, 5, 17):
        worst = max(worst, _perturbed_future_change(lambda z: softmax_attention(z, params, CAUSAL, True)[0], x, t, rng))
        worst = max(worst, _perturbed_future_change(lambda z: sliding_window_attention(z, params, 4)[0], x, t, rng))
    return worst


def check_attention_row_stochastic(ctx):
    x, params, _ = _attn_setup(ctx, 11)
    probs = [softmax_attention(x, params, CAUSAL)[1], softmax_attention(x, params, BIDIRECTIONAL)[1],
             sliding_window_attention(x, params, 5)[1]]
    return max(_row_error(p) for p in probs)


def check_attention_permutation_equivariance(ctx):
    x, params, rng = _attn_setup(ctx, 12)
    perm = rng.permutation(x.shape[1])
    out = softmax_attention(x, params, BIDIRECTIONAL)[0]
    out_p = softmax_attention(x[:, perm], params, BIDIRECTIONAL)[0]
    return relative_error(out[:, perm], out_p)


def check_swa_wide_equals_causal(ctx):
    x, params, _ = _attn_setup(ctx, 13)
    T = x.shape[1]
    return _max_abs(sliding_window_attention(x, params, T - 1, use_rope=True)[0],
                    softmax_attention(x, params, CAUSAL, use_rope=True)[0])


# ---------------------------------------------------------------------------
# linear attention

def _linear_setup(ctx, seed_offset, T=32, D=8, L=4, heads=1):
    rng = ctx.rng(seed_offset)
    x = ctx.normal(rng, (1, T, D))
    params = AttentionParams.random(rng, D, D, heads=heads, dtype=ctx.dtype)
    fm = FeatureMap(ctx.normal(rng, (D // heads, L), 1.0 / np.sqrt(D)))
    return x, params, fm


def check_undirected_equivalence(ctx):
    worst = 0.0
    for i in range(100):
        x, params, fm = _linear_setup(ctx, 1000 + i)
        _, weights = linear_attention_direct(x, params, fm)
        worst = max(worst, _max_abs(undirected_attention_probs(x, params, fm), weights))
    return worst


def check_linear_low_rank(ctx):
    x, params, fm = _linear_setup(ctx, 21, T=32, L=4)
    q = x @ params.W_q
    k = x @ params.W_k
    M = np.exp(q @ fm.projection)[0] @ np.exp(k @ fm.projection)[0].T
    s = np.linalg.svd(M.astype(np.float64), compute_uv=False)
    return float(s[fm.n_features] / s[0])


def check_linear_recurrent_vs_direct(ctx):
    x, params, fm = _linear_setup(ctx, 22, heads=2, D=8, L=4)
    return relative_error(linear_attention_recurrent(x, params, fm), linear_attention_direct(x, params, fm)[0])


def check_linear_row_stochastic(ctx):
    x, params, fm = _linear_setup(ctx, 23)
    return max(_row_error(undirected_attention_probs(x, params, fm)),
               _row_error(linear_attention_direct(x, params, fm)[1]))


# ---------------------------------------------------------------------------
# Latte

def _latte_setup(ctx, offset, B=2, T=64, D=32, L=16, heads=2):
    rng = ctx.rng(offset)
    x = ctx.normal(rng, (B, T, D))
    return x, LatteParams.random(rng, D, L, heads=heads, dtype=ctx.dtype), rng


def check_scan_vs_bruteforce(ctx):
    x, params, _ = _latte_setup(ctx, 30)
    return _max_abs(latte_causal_scan(x, params), latte_causal_bruteforce(x, params)[0])


def check_stream_equals_scan(ctx):
    x, params, _ = _latte_setup(ctx, 31)
    scan = latte_causal_scan(x, params)
    stream, _ = latte_stream(x, params)
    return 0.0 if np.array_equal(scan, stream) else max(_max_abs(scan, stream), np.finfo(ctx.dtype).tiny)


def check_latte_causality(ctx):
    x, params, rng = _latte_setup(ctx, 32, T=40)
    return max(_perturbed_future_change(lambda z: latte_causal_scan(z, params), x, t, rng) for t in (0, 9, 31))


def check_latte_prefix_permutation(ctx):
    x, params, rng = _latte_setup(ctx, 33, T=40)
    worst = 0.0
    for t in (5, 20, 39):
        y = _permute_prefix(x, t, rng)
        worst = max(worst, _max_abs(latte_causal_scan(x, params)[:, t], latte_causal_scan(y, params)[:, t]))
    return worst


def check_latte_row_stochastic(ctx):
    x, params, _ = _latte_setup(ctx, 34, T=32)
    return _row_error(latte_causal_bruteforce(x, params)[1].probs)


def check_latte_bidirectional_rank(ctx):
    x, params, _ = _latte_setup(ctx, 35, B=1, T=32, D=16, L=4, heads=1)
    probs = latte_bidirectional(x, params, return_trace=True)[1]["probs"][0, 0]
    s = np.linalg.svd(probs.astype(np.float64), compute_uv=False)
    return float(s[4] / s[0])


def check_latte_convex_envelope(ctx):
    x, params, _ = _latte_setup(ctx, 36, T=32, heads=1)
    out = latte_causal_scan(x, params).astype(np.float64)
    v = (x @ params.W_v).astype(np.float64)
    lo = np.minimum.accumulate(v, axis=1)
    hi = np.maximum.accumulate(v, axis=1)
    excess = np.maximum(lo - out, out - hi)
    return float(max(excess.max(), 0.0) / max(np.abs(v).max(), 1.0))


def check_scan_backward_vs_fd(ctx):
    # finite differences need 64-bit regardless of the run precision
    rng = ctx.rng(37)
    B, T, H, Lh, Dh = 1, 7, 2, 3, 2
    q = softmax(rng.normal(size=(B, T, H, Lh)), axis=-1)
    k = rng.normal(size=(B, T, H, Lh)) * 2.0
    v = rng.normal(size=(B, T, H, Dh))
    w = rng.normal(size=(B, T, H, Dh))
    unroll = 3
    _, ckpt = latte_scan_kernel(q, k, v, unroll, return_checkpoints=True)
    grads = latte_scan_backward(q, k, v, w, ckpt, unroll)
    worst = 0.0
    for idx, arr in enumerate((q, k, v)):
        def f(z, idx=idx):
            args = [q, k, v]
            args[idx] = z
            return float((latte_scan_kernel(*args, unroll) * w).sum())
        worst = max(worst, relative_error(grads[idx], finite_difference_gradient(f, arr.copy(), 1e-6)))
    return worst


def _extreme_latte_setup(ctx):
    """Tied query/key latents with inputs rescaled so key logits span about +-50."""
    rng = ctx.rng(38)
    D, L, T = 16, 8, 64
    x = rng.normal(size=(2, T, D))
    W = rng.normal(0, 1 / np.sqrt(D), (D, L))
    params = LatteParams(W.astype(ctx.dtype), W.astype(ctx.dtype), rng.normal(0, 1 / np.sqrt(D), (D, D)).astype(ctx.dtype),
                         heads=2)
    x = x * (50.0 / np.abs(x @ W).max())
    return x.astype(np.float32), LatteParams(*(m.astype(np.float32) for m in (params.W_q, params.W_k, params.W_v)),
                                             heads=2), params


def check_stabilized_scan_finite(ctx):
    # always exercised in 32-bit, where exp(+-50) products leave the exponent range
    x, params, _ = _extreme_latte_setup(ctx)
    out = latte_causal_scan(x, params, stabilize=not ctx.break_stabilization)
    if not np.all(np.isfinite(out)):
        return float("inf")
    ref = latte_causal_bruteforce(x, params)[0]
    return relative_error(out, ref)


def check_unshifted_recursion_overflows(ctx):
    x, params, _ = _extreme_latte_setup(ctx)
    _, overflow = latte_causal_unshifted(x, params, return_overflow=True)
    return float(overflow)


# ---------------------------------------------------------------------------
# Macchiato

def _macchiato_setup(ctx, offset, T=24, D=16, L=8, heads=2, window=6, mode="direct", rope=True):
    rng = ctx.rng(offset)
    x = ctx.normal(rng, (2, T, D))
    return x, MacchiatoParams.random(rng, D, L, heads=heads, window=window, feature_mode=mode, dtype=ctx.dtype,
                                     use_rope_in_swa=rope), rng


def check_macchiato_row_stochastic(ctx):
    worst = 0.0
    for i, mode in enumerate(("direct", "conv", "rglru")):
        x, params, _ = _macchiato_setup(ctx, 40 + i, mode=mode)
        worst = max(worst, _row_error(macchiato_forward(x, params, return_trace=True)[1]))
    return worst


def check_macchiato_trace_causal(ctx):
    x, params, rng = _macchiato_setup(ctx, 43, mode="conv")
    probs = macchiato_forward(x, params, return_trace=True)[1]
    T = x.shape[1]
    above = probs[..., ~mask_matrix(T, CAUSAL)]
    out_change = max(_perturbed_future_change(lambda z: macchiato_forward(z, params)[0], x, t, rng) for t in (0, 11))
    return max(float(np.abs(above).max()), out_change)


def check_macchiato_L0_equals_swa(ctx):
    x, params, _ = _macchiato_setup(ctx, 44)
    empty = macchiato_params_without_latents(params)
    worst = 0.0
    # both the traced and the blocked (trace-free) window paths
    for trace in (True, False):
        out, probs = macchiato_forward(x, empty, return_trace=trace)
        swa, swa_probs = sliding_window_attention(x, empty.value_params(), params.window, use_rope=True,
                                                  return_probs=trace)
        pairs = [(out, swa)] + ([(probs, swa_probs)] if trace else [])
        for a, b in pairs:
            if not np.array_equal(a, b):
                worst = max(worst, _max_abs(a, b) or float("inf"))
    return worst


def check_macchiato_saturated_gate(ctx):
    x, params, _ = _macchiato_setup(ctx, 45, window=40)
    x[..., 0] = 1.0  # constant channel drives the window logit
    params.gate_row_0[0] = 60.0
    params.latte.W_q[0] = 0.0
    T = x.shape[1]
    out = macchiato_forward(x, params)[0]
    ref = softmax_attention(x, params.value_params(), CAUSAL, use_rope=True)[0]
    assert params.window >= T
    return _max_abs(out, ref)


def _prefix_change(x, params, t, rng):
    y = _permute_prefix(x, t, rng)
    return _max_abs(macchiato_forward(x, params)[0][:, t], macchiato_forward(y, params)[0][:, t])


def check_macchiato_direct_prefix_permutation(ctx):
    # window covers the whole sequence and carries no rotary phase, so only features can add position
    x, params, rng = _macchiato_setup(ctx, 46, T=20, window=32, rope=False)
    return max(_prefix_change(x, params, t, rng) for t in (4, 12, 19))


def _count_broken(ctx, mode, offset):
    broken = 0
    for i in range(100):
        x, params, rng = _macchiato_setup(ctx, offset + i, T=12, D=8, L=4, heads=1, window=32, mode=mode, rope=False)
        t = int(rng.integers(3, 12))
        broken += _prefix_change(x, params, t, rng) > 1e-3
    return float(broken)


def check_macchiato_conv_breaks(ctx):
    return _count_broken(ctx, "conv", 2000)


def check_macchiato_rglru_breaks(ctx):
    return _count_broken(ctx, "rglru", 3000)


CHECKS: dict[str, Callable] = {
    "softmax_row_stochastic": check_softmax_row_stochastic,
    "cumulative_max_idempotent": check_cumulative_max_idempotent,
    "shifted_cumsum_vs_direct": check_shifted_cumsum_vs_direct,
    "determinism_bitwise": check_determinism,
    "attention_causality": check_attention_causality,
    "attention_row_stochastic": check_attention_row_stochastic,
    "attention_permutation_equivariance": check_attention_permutation_equivariance,
    "swa_wide_equals_causal": check_swa_wide_equals_causal,
    "undirected_equivalence": check_undirected_equivalence,
    "linear_low_rank": check_linear_low_rank,
    "linear_recurrent_vs_direct": check_linear_recurrent_vs_direct,
    "linear_row_stochastic": check_linear_row_stochastic,
    "scan_vs_bruteforce": check_scan_vs_bruteforce,
    "stream_equals_scan_bitwise": check_stream_equals_scan,
    "latte_causality": check_latte_causality,
    "latte_prefix_permutation": check_latte_prefix_permutation,
    "latte_row_stochastic": check_latte_row_stochastic,
    "latte_bidirectional_rank": check_latte_bidirectional_rank,
    "latte_convex_envelope": check_latte_convex_envelope,
    "scan_backward_vs_fd": check_scan_backward_vs_fd,
    "stabilized_scan_finite": check_stabilized_scan_finite,
    "unshifted_recursion_overflows": check_unshifted_recursion_overflows,
    "macchiato_row_stochastic": check_macchiato_row_stochastic,
    "macchiato_trace_causal": check_macchiato_trace_causal,
    "macchiato_L0_equals_swa": check_macchiato_L0_equals_swa,
    "macchiato_saturated_gate_equals_attention": check_macchiato_saturated_gate,
    "macchiato_direct_prefix_permutation": check_macchiato_direct_prefix_permutation,
    "macchiato_conv_breaks_permutation": check_macchiato_conv_breaks,
    "macchiato_rglru_breaks_permutation": check_macchiato_rglru_breaks,
}


def parse_tol_overrides(text: str | None) -> dict[str, float]:
    """``"name=value,name=value"`` -> dict; unknown check names are rejected."""
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if not item.strip():
            continue
        name, sep, value = item.partition("=")
        name = name.strip()
        if not sep or name not in TOLERANCES:
            raise ValueError(f"bad tolerance override {item!r}")
        out[name] = float(value)
    return out


def run_verify(precision="f64", seed: int = 0, tol_overrides: dict | None = None, break_stabilization: bool = False,
               only=None) -> list[CheckResult]:
    dtype = resolve_dtype(precision)
    ctx = VerifyContext(np.dtype(dtype), seed, break_stabilization)
    col = 0 if ctx.dtype == np.float32 else 1
    overrides = tol_overrides or {}
    results = []
    for name, fn in CHECKS.items():
        if only is not None and name not in only:
            continue
        tol = overrides.get(name, TOLERANCES[name][col])
        t0 = time.perf_counter()
        note = ""
        try:
            with np.errstate(all="ignore"):
                measured = float(fn(ctx))
        except Exception as exc:  # a crashing check is a failed check
            measured, note = float("nan"), f"{type(exc).__name__}: {exc}"
        if name in AT_LEAST:
            ok = measured >= tol
        else:
            ok = measured <= tol
        results.append(CheckResult(name, bool(ok), measured, tol, time.perf_counter() - t0, note))
    return results


def verify_digest(precision, seed, overrides, break_stabilization) -> str:
    blob = json.dumps({"precision": str(precision), "seed": seed, "tol_overrides": overrides or {},
                       "break_stabilization": bool(break_stabilization)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  {'measured':>12}  {'tolerance':>10}"]
    for r in results:
        cmp = ">=" if r.name in AT_LEAST else "<="
        line = f"{r.name:<{width}}  {r.status:<6}  {r.measured:12.3e}  {cmp}{r.tolerance:8.1e}"
        if r.note:
            line += f"  ({r.note})"
        lines.append(line)
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)


def write_report(path: str, results: list[CheckResult], digest: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={digest}\n")
        w = csv.writer(fh)
        w.writerow(["check_name", "status", "measured", "tolerance"])
        for r in results:
            w.writerow([r.name, r.status, repr(r.measured), repr(r.tolerance)])
