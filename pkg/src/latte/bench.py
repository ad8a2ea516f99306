"""Forward-pass timing of single mixer layers at a constant token budget.

For each sequence length T the batch is ``budget // T``, so every call
processes the same number of tokens. The fitted slope uses time per sequence
(call time divided by batch): about 1 for linear-time mixers, about 2 for
quadratic attention.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionParams, blocked_causal_attention, split_heads, merge_heads
from .core import LatteParams, latte_causal_scan
from .linear import FeatureMap, linear_attention_recurrent
from .macchiato import MacchiatoParams, macchiato_forward

BENCH_MIXERS = ("attention", "swa", "linear", "latte", "macchiato_conv", "macchiato_rglru")
DEFAULT_SEQ_LENS = (512, 1024, 2048, 4096, 8192)
DEFAULT_MAX_BYTES = 2 * 1024 ** 3


class BudgetError(ValueError):
    """Raised when a benchmark cell would need more memory than allowed."""


@dataclass
class BenchConfig:
    d_model: int = 256
    heads: int = 4
    n_latents: int = 128
    window: int = 128
    token_budget: int = 16384
    repeat: int = 3
    warmup: int = 1
    precision: str = "f32"
    seed: int = 0
    block: int = 128
    max_bytes: int = DEFAULT_MAX_BYTES

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class BenchRow:
    mixer: str
    T: int
    batch: int
    mean_ms: float
    std_ms: float
    per_seq_ms: float


def batch_for(T: int, cfg: BenchConfig) -> int:
    if T < 1:
        raise ValueError("sequence lengths must be positive")
    if T > cfg.token_budget:
        raise BudgetError(f"T={T} exceeds the token budget {cfg.token_budget}")
    return cfg.token_budget // T


def estimate_bytes(mixer: str, T: int, cfg: BenchConfig) -> int:
    """Rough peak working set of one forward call."""
    B = batch_for(T, cfg)
    item = 4 if cfg.precision == "f32" else 8
    D, H, L = cfg.d_model, cfg.heads, cfg.n_latents
    acts = 6 * B * T * D * item
    if mixer == "attention":
        # a block of query rows against every visible key, a few temporaries deep
        return acts + 4 * B * H * cfg.block * T * item
    if mixer == "swa":
        return acts + 4 * B * H * cfg.block * (cfg.block + cfg.window) * item
    if mixer == "linear":
        return acts + 4 * B * T * L * item + 3 * B * D * L * item
    # Latte family: logits and probabilities (B, T, L), plus a per-block state history
    extra = 4 * B * H * cfg.block * (cfg.block + cfg.window) * item if mixer.startswith("macchiato") else 0
    return acts + 4 * B * T * L * item + 2 * B * L * (D // H) * item + extra


def _make_layer(mixer: str, cfg: BenchConfig, rng):
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    D, H = cfg.d_model, cfg.heads
    if mixer in ("attention", "swa"):
        p = AttentionParams.random(rng, D, D, heads=H, dtype=dtype)
        window = None if mixer == "attention" else cfg.window

        def run(x):
            q, k, v = (split_heads(x @ W, H) for W in (p.W_q, p.W_k, p.W_v))
            return merge_heads(blocked_causal_attention(q, k, v, window, block=cfg.block))
        return run
    if mixer == "linear":
        p = AttentionParams.random(rng, D, D, heads=H, dtype=dtype)
        fm = FeatureMap(rng.normal(0, 0.1 / np.sqrt(D // H), (D // H, cfg.n_latents // H)).astype(dtype))
        return lambda x: linear_attention_recurrent(x, p, fm)
    if mixer == "latte":
        p = LatteParams.random(rng, D, cfg.n_latents, heads=H, dtype=dtype)
        return lambda x: latte_causal_scan(x, p)
    if mixer in ("macchiato_conv", "macchiato_rglru"):
        mode = mixer.split("_")[1]
        p = MacchiatoParams.random(rng, D, cfg.n_latents, heads=H, window=cfg.window, feature_mode=mode, dtype=dtype)
        return lambda x: macchiato_forward(x, p)[0]
    raise ValueError(f"unknown mixer {mixer!r}; choose from {', '.join(BENCH_MIXERS)}")


def check_budget(mixers, seq_lens, cfg: BenchConfig):
    for mixer in mixers:
        for T in seq_lens:
            need = estimate_bytes(mixer, T, cfg)
            if need > cfg.max_bytes:
                raise BudgetError(f"{mixer} at T={T} (batch {batch_for(T, cfg)}) needs about "
                                  f"{need / 2 ** 20:.0f} MiB, over the {cfg.max_bytes / 2 ** 20:.0f} MiB budget")


def time_cell(fn, x, repeat: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn(x)
    times = np.empty(repeat)
    for i in range(repeat):
        t0 = time.perf_counter()
        fn(x)
        times[i] = (time.perf_counter() - t0) * 1e3
    return times


def run_bench(mixers, seq_lens, cfg: BenchConfig, log=None) -> list[BenchRow]:
    if cfg.repeat < 1:
        raise ValueError("repeat must be >= 1")
    mixers, seq_lens = list(mixers), sorted(int(t) for t in seq_lens)
    for m in mixers:
        if m not in BENCH_MIXERS:
            raise ValueError(f"unknown mixer {m!r}; choose from {', '.join(BENCH_MIXERS)}")
    check_budget(mixers, seq_lens, cfg)
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    rows = []
    for mixer in mixers:
        fn = _make_layer(mixer, cfg, np.random.default_rng(cfg.seed))
        for T in seq_lens:
            B = batch_for(T, cfg)
            x = np.random.default_rng([cfg.seed, T]).normal(size=(B, T, cfg.d_model)).astype(dtype)
            times = time_cell(fn, x, cfg.repeat, cfg.warmup)
            std = float(times.std(ddof=1)) if cfg.repeat > 1 else 0.0
            row = BenchRow(mixer, T, B, float(times.mean()), std, float(times.mean()) / B)
            rows.append(row)
            if log:
                log(f"{mixer:>16} T={T:<6d} batch={B:<4d} {row.mean_ms:10.1f} ms  +- {row.std_ms:.1f}")
    return rows


def fit_slopes(rows: list[BenchRow]) -> dict[str, float]:
    """Least-squares slope of log(per-sequence time) against log(T), per mixer."""
    out = {}
    for mixer in dict.fromkeys(r.mixer for r in rows):
        pts = [(r.T, r.per_seq_ms) for r in rows if r.mixer == mixer]
        if len(pts) < 2:
            out[mixer] = float("nan")
            continue
        T, t = np.array(pts).T
        out[mixer] = float(np.polyfit(np.log(T), np.log(t), 1)[0])
    return out


def write_bench_csv(path: str, rows: list[BenchRow], slopes: dict[str, float], digest: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={digest}\n")
        for mixer, s in slopes.items():
            fh.write(f"# slope {mixer}={s:.4f}\n")
        w = csv.writer(fh)
        w.writerow(["mixer", "T", "mean_ms", "std_ms", "batch", "per_seq_ms"])
        for r in rows:
            w.writerow([r.mixer, r.T, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}", r.batch, f"{r.per_seq_ms:.4f}"])
