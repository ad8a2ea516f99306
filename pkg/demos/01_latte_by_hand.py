"""Latte from the ground up: the quadratic oracle, the linear scan and the streaming step.

Run:  python demos/01_latte_by_hand.py
"""
import numpy as np

from latte import LatteParams, latte_causal_bruteforce, latte_causal_scan, latte_stream
from latte.core import latte_causal_unshifted, latent_posterior

rng = np.random.default_rng(0)
B, T, D, L, H = 1, 12, 16, 8, 2
x = rng.normal(size=(B, T, D))
p = LatteParams.random(rng, D, L, heads=H)

# The oracle builds the full T x T matrix p(s|t) = sum_l p(l|t) p(s|l, t).
# Every row is a distribution over the visible past.
out_ref, trace = latte_causal_bruteforce(x, p)
print("implied matrix, head 0, first 4 rows:")
print(np.round(trace.probs[0, 0, :4, :4], 3))
print("row sums:", np.round(trace.probs.sum(-1)[0, 0], 12))

# The scan never forms that matrix. It carries, per latent, a running
# normaliser and a running value sum, both shifted by the largest key logit
# seen so far. Cost is linear in T.
out = latte_causal_scan(x, p)
print("\nscan vs oracle, max abs diff:", np.abs(out - out_ref).max())

# Streaming one token at a time reproduces the scan exactly, bit for bit.
streamed, state = latte_stream(x, p)
print("streamed == scan:", np.array_equal(streamed, out), " tokens consumed:", state.t)

# Why the shift matters: tie query and key latents and push the logits to +-50.
# In float32 the product of the two normalisers overflows without the shift.
W = rng.normal(0, 0.25, (D, L))
big = rng.normal(size=(1, 40, D))
big *= 50.0 / np.abs(big @ W).max()
p32 = LatteParams(W.astype(np.float32), W.astype(np.float32), rng.normal(0, 0.25, (D, D)).astype(np.float32),
                  heads=H)
big = big.astype(np.float32)
ref = latte_causal_bruteforce(big, p32)[0]
with np.errstate(all="ignore"):
    naive, overflow = latte_causal_unshifted(big, p32, return_overflow=True)
print("\nlogits reach +-50 in float32")
scale = np.abs(ref).max()
print(f"  shifted scan, relative error: {np.abs(latte_causal_scan(big, p32) - ref).max() / scale:.1e}")
print(f"  unshifted, relative error:    {np.abs(naive - ref).max() / scale:.1e} ({overflow} overflowed entries)")

# Which latents does each token use?  p(l|t) depends on the token alone.
post, ent = latent_posterior(x, p)
print("\nusage entropy per head:", np.round(ent, 3), " max possible:", round(np.log(L // H), 3))
