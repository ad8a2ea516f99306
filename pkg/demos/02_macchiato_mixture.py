"""Latte-Macchiato: a per-token gate mixes a sliding window with the latent states.

Run:  python demos/02_macchiato_mixture.py
"""
import numpy as np

from latte.attention import CAUSAL, sliding_window_attention, softmax_attention
from latte.macchiato import MacchiatoParams, macchiato_forward, macchiato_params_without_latents, mixture_gate

rng = np.random.default_rng(1)
B, T, D, L, H, w = 1, 20, 16, 8, 2, 4
x = rng.normal(size=(B, T, D))
p = MacchiatoParams.random(rng, D, L, heads=H, window=w, feature_mode="rglru")

# The gate is a softmax over (window, latent 1..L/H) for every token and head.
g = mixture_gate(x, p)
print("gate for token 0, head 0 (window first):", np.round(g[0, 0, 0], 3))

# The combined trace is still a causal, row-stochastic T x T matrix.
out, probs = macchiato_forward(x, p, return_trace=True)
print("row sums:", np.round(probs.sum(-1)[0, 0, :6], 12))
print("anything above the diagonal:", np.abs(np.triu(probs[0, 0], 1)).max())
print("entries beyond the window come only from the latents; row 10, head 0:")
print(np.round(probs[0, 0, 10, :11], 3))

# Two limits. No latents at all: exactly sliding-window attention.
empty = macchiato_params_without_latents(p)
# (the trace-free path of both uses blocked window attention)
swa = sliding_window_attention(x, empty.value_params(), w, return_probs=False)[0]
print("\nL=0 equals SWA exactly:", np.array_equal(macchiato_forward(x, empty)[0], swa))

# A gate pinned to the window with a window wider than the sequence: causal softmax attention.
wide = MacchiatoParams.random(rng, D, L, heads=H, window=T)
xs = x.copy()
xs[..., 0] = 1.0
wide.gate_row_0[0] = 60.0
wide.latte.W_q[0] = 0.0
ref = softmax_attention(xs, wide.value_params(), CAUSAL, use_rope=True)[0]
print("saturated gate vs causal attention:", np.abs(macchiato_forward(xs, wide)[0] - ref).max())

# Latte alone cannot tell the order of the past. Conv or RG-LRU features can.
for mode in ("direct", "conv", "rglru"):
    q = MacchiatoParams.random(np.random.default_rng(2), D, L, heads=H, window=64, feature_mode=mode,
                               use_rope_in_swa=False)
    y = x.copy()
    y[:, :9] = x[:, np.random.default_rng(3).permutation(9)]
    change = np.abs(macchiato_forward(x, q)[0][:, 9] - macchiato_forward(y, q)[0][:, 9]).max()
    print(f"  {mode:>6} features, output change at t=9 after shuffling the prefix: {change:.2e}")
