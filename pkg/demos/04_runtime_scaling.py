"""Forward-pass time against sequence length with the token count per call held fixed.

Under a constant token budget a linear-time mixer costs the same per token at
every length, while quadratic attention pays a factor T per token.

Run:  python demos/04_runtime_scaling.py
"""
from latte.bench import BenchConfig, fit_slopes, run_bench

cfg = BenchConfig(d_model=128, heads=4, n_latents=64, window=64, token_budget=4096, repeat=2)
rows = run_bench(["latte", "macchiato_rglru", "attention"], [256, 512, 1024, 2048, 4096], cfg, log=print)
for mixer, slope in fit_slopes(rows).items():
    print(f"{mixer:>16}: per-sequence time grows like T^{slope:.2f}")
