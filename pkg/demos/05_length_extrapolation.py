"""Train at one length, evaluate at four times that length.

Latte-Macchiato has no position table: the window uses relative rotary phases
and the latent states are summaries of the whole past. Attention with a learned
absolute position table refuses outright.

Run:  python demos/05_length_extrapolation.py [steps]
"""
import sys

import numpy as np

from latte.model import ModelConfig, PositionTableExceeded, build_model, train
from latte.tasks import length_extrapolation_eval, lm_batches, synthetic_text

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150
data = np.frombuffer(synthetic_text(200_000), dtype=np.uint8).astype(np.int64)
print(bytes(data[:120].astype(np.uint8)).decode())
cut = int(0.9 * data.size)
train_tok, held = data[:cut], data[cut:]

base = dict(n_layers=2, n_heads=2, d_model=64, d_ff=128, n_latents=16, window=32, vocab_size=256, seq_len=128,
            batch_size=8, learning_rate=3e-3, warmup_steps=30, total_steps=steps, dropout=0.0)
for kind, positions in (("macchiato_rglru", "rope"), ("attention", "learned")):
    cfg = ModelConfig(**base, mixer_kind=kind, positions=positions)
    store = build_model(cfg)
    train(store, cfg, lm_batches(train_tok, cfg.seq_len, cfg.batch_size), steps)
    try:
        rows = length_extrapolation_eval(store, cfg, held, 128, [128, 256, 512], n_tokens=4096)
        print(f"{kind}: " + ", ".join(f"ppl@{n} {ppl:.3f}" for n, ppl in rows))
    except PositionTableExceeded as exc:
        print(f"{kind} with learned positions: {exc}")
