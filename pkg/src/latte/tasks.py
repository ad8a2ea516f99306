"""Synthetic tasks: multi-query associative recall (MQAR) and byte-level text.

MQAR layout, per example of length T with N pairs::

    k1 v1 k2 v2 ... kN vN  f f k3 f f k1 f ... f

The first 2N tokens bind keys to values. Each key is then queried exactly once
at a random later position; every other position holds a filler token. The
model must predict, at each query position, the value bound to that key.
Token ids: 0 is the filler, keys are ``1 .. V/2 - 1``, values ``V/2 .. V - 1``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

FILLER = 0


@dataclass(frozen=True)
class MQARConfig:
    vocab_size: int = 64
    seq_len: int = 64
    num_pairs: int = 4
    seed: int = 0
    train_examples: int = 100_000
    test_examples: int = 10_000

    def __post_init__(self):
        if self.vocab_size < 4 or self.vocab_size % 2:
            raise ValueError("vocab_size must be an even number >= 4")
        if self.num_pairs < 1:
            raise ValueError("num_pairs must be >= 1")
        if 3 * self.num_pairs > self.seq_len:
            raise ValueError(f"infeasible packing: {self.num_pairs} pairs plus queries need "
                             f"{3 * self.num_pairs} positions, seq_len is {self.seq_len}")
        if self.num_pairs > self.n_keys:
            raise ValueError(f"infeasible packing: {self.num_pairs} distinct keys requested, "
                             f"only {self.n_keys} available")

    @property
    def n_keys(self) -> int:
        return self.vocab_size // 2 - 1

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(dataclasses.asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class MQARExample:
    tokens: np.ndarray       # (T,) int
    target_mask: np.ndarray  # (T,) bool
    targets: np.ndarray      # (T,) int, meaningful where the mask is set


@dataclass
class MQARDataset:
    tokens: np.ndarray   # (n, T) int32
    mask: np.ndarray     # (n, T) bool
    targets: np.ndarray  # (n, T) int32

    def __len__(self):
        return self.tokens.shape[0]

    def __iter__(self) -> Iterator[MQARExample]:
        for i in range(len(self)):
            yield MQARExample(self.tokens[i], self.mask[i], self.targets[i])

    def subset(self, n: int) -> "MQARDataset":
        return MQARDataset(self.tokens[:n], self.mask[:n], self.targets[:n])


def generate_mqar(cfg: MQARConfig, split: str = "train", n: int | None = None) -> MQARDataset:
    """Deterministic per ``(cfg, split)``; the test split uses an independent stream."""
    streams = {"train": 0, "test": 1}
    if split not in streams:
        raise ValueError(f"unknown split {split!r}")
    if n is None:
        n = cfg.train_examples if split == "train" else cfg.test_examples
    rng = np.random.default_rng([cfg.seed, streams[split]])
    T, N, V = cfg.seq_len, cfg.num_pairs, cfg.vocab_size
    keys = np.argsort(rng.random((n, cfg.n_keys)), axis=1)[:, :N] + 1
    values = rng.integers(V // 2, V, (n, N))
    qpos = np.argsort(rng.random((n, T - 2 * N)), axis=1)[:, :N] + 2 * N

    tokens = np.full((n, T), FILLER, dtype=np.int32)
    tokens[:, 0:2 * N:2] = keys
    tokens[:, 1:2 * N:2] = values
    rows = np.arange(n)[:, None]
    tokens[rows, qpos] = keys
    mask = np.zeros((n, T), dtype=bool)
    mask[rows, qpos] = True
    targets = np.zeros((n, T), dtype=np.int32)
    targets[rows, qpos] = values
    return MQARDataset(tokens, mask, targets)


def check_recoverable(ex: MQARExample) -> bool:
    """Every query's target equals the value following the key's most recent earlier occurrence."""
    for t in np.flatnonzero(ex.target_mask):
        key = ex.tokens[t]
        earlier = np.flatnonzero(ex.tokens[:t] == key)
        if earlier.size == 0:
            return False
        s = earlier[-1]
        if s + 1 >= t or ex.tokens[s + 1] != ex.targets[t]:
            return False
    return True


def mqar_batches(ds: MQARDataset, batch_size: int, seed: int = 0):
    """``step -> (ids, targets, mask)``, reshuffled every epoch; pure in ``step``."""
    n = len(ds)
    per_epoch = max(1, n // batch_size)

    def batch(step: int):
        epoch, i = divmod(step, per_epoch)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        idx = order[i * batch_size:(i + 1) * batch_size]
        return ds.tokens[idx], ds.targets[idx], ds.mask[idx]
    return batch


def mqar_accuracy(logits: np.ndarray, ds: MQARDataset) -> float:
    pred = logits.argmax(axis=-1)
    hits = (pred == ds.targets) & ds.mask
    return float(hits.sum() / ds.mask.sum())


def evaluate_mqar(model, cfg_model, ds: MQARDataset, batch_size: int = 256) -> float:
    """Query accuracy. ``model`` is a parameter store or a callable ``ids -> logits``."""
    from .model import forward_lm

    predict = model if callable(model) else (lambda ids: forward_lm(model, cfg_model, ids))
    hits = total = 0
    for i in range(0, len(ds), batch_size):
        sl = slice(i, i + batch_size)
        pred = predict(ds.tokens[sl]).argmax(axis=-1)
        m = ds.mask[sl]
        hits += int(((pred == ds.targets[sl]) & m).sum())
        total += int(m.sum())
    return hits / total


def oracle_predictor(vocab_size: int):
    """Logits that look up each token's most recent binding; scores 1.0 by construction."""
    def predict(ids):
        ids = np.asarray(ids)
        out = np.zeros(ids.shape + (vocab_size,))
        for b in range(ids.shape[0]):
            binding = {}
            for t in range(ids.shape[1]):
                tok = int(ids[b, t])
                if tok in binding:
                    out[b, t, binding[tok]] = 1.0
                if t > 0 and 0 < ids[b, t - 1] < vocab_size // 2 and tok >= vocab_size // 2:
                    binding[int(ids[b, t - 1])] = tok
        return out
    return predict


# dataset cache: magic, digest, n, T, then int32 tokens, packed mask bits, int32 targets
_CACHE_MAGIC = b"MQAR1"


def save_mqar(path: str, ds: MQARDataset, cfg: MQARConfig):
    n, T = ds.tokens.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(cfg.digest().encode("ascii"))
        fh.write(struct.pack("<II", n, T))
        fh.write(ds.tokens.astype("<i4").tobytes())
        fh.write(np.packbits(ds.mask, axis=1).tobytes())
        fh.write(ds.targets.astype("<i4").tobytes())


def load_mqar(path: str, cfg: MQARConfig | None = None) -> MQARDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not an MQAR cache")
    digest = blob[5:69].decode("ascii")
    if cfg is not None and digest != cfg.digest():
        raise ValueError(f"{path}: cache was built for a different config")
    n, T = struct.unpack("<II", blob[69:77])
    off = 77
    tokens = np.frombuffer(blob, "<i4", n * T, off).reshape(n, T).astype(np.int32)
    off += 4 * n * T
    row_bytes = (T + 7) // 8
    mask = np.unpackbits(np.frombuffer(blob, np.uint8, n * row_bytes, off).reshape(n, row_bytes),
                         axis=1, count=T).astype(bool)
    off += n * row_bytes
    targets = np.frombuffer(blob, "<i4", n * T, off).reshape(n, T).astype(np.int32)
    return MQARDataset(tokens, mask, targets)


def cached_mqar(cache_dir: str, cfg: MQARConfig, split: str) -> MQARDataset:
    import os
    path = os.path.join(cache_dir, f"mqar-{cfg.digest()[:16]}-{split}.bin")
    if os.path.exists(path):
        return load_mqar(path, cfg)
    ds = generate_mqar(cfg, split)
    os.makedirs(cache_dir, exist_ok=True)
    save_mqar(path, ds, cfg)
    return ds


# ---------------------------------------------------------------------------
# byte-level text

def load_text_corpus(path: str, seq_len: int) -> np.ndarray:
    """Bytes of ``path`` as ``(n_chunks, seq_len)`` int32 tokens; the tail that does not fill a chunk is dropped."""
    with open(path, "rb") as fh:
        data = fh.read()
    return tokenize_bytes(data, seq_len)


def tokenize_bytes(data: bytes, seq_len: int) -> np.ndarray:
    if not data:
        raise ValueError("empty corpus")
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int32)
    n = tokens.size // seq_len
    return tokens[: n * seq_len].reshape(n, seq_len)


def detokenize(chunks: np.ndarray) -> bytes:
    return np.asarray(chunks, dtype=np.uint8).reshape(-1).tobytes()


_SUBJECTS = ["the cat", "a dog", "my neighbour", "the old sailor", "every child", "the baker", "a small bird",
             "the teacher", "our captain", "the farmer", "a tired horse", "the young queen"]
_VERBS = ["sees", "follows", "remembers", "carries", "finds", "paints", "watches", "calls", "greets", "helps"]
_OBJECTS = ["the red boat", "a quiet river", "the long road", "an apple", "the open door", "a green hill",
            "the cold wind", "a letter", "the bright moon", "a wooden box", "the market"]
_TAILS = ["in the morning", "after dinner", "near the harbour", "every day", "without a word", "at noon",
          "before the rain", "with great care"]


def synthetic_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like prose from a small template grammar."""
    rng = np.random.default_rng(seed)
    parts, size = [], 0
    while size < n_bytes:
        s = f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)}"
        if rng.random() < 0.6:
            s += f" {rng.choice(_TAILS)}"
        s = s[0].upper() + s[1:] + (". " if rng.random() < 0.85 else ".\n")
        parts.append(s)
        size += len(s)
    return "".join(parts).encode()[:n_bytes]


def lm_batches(tokens: np.ndarray, seq_len: int, batch_size: int, seed: int = 0):
    """``step -> (ids, targets, None)`` with random windows of ``seq_len + 1`` tokens."""
    flat = np.asarray(tokens).reshape(-1)
    hi = flat.size - seq_len - 1
    if hi < 1:
        raise ValueError("corpus shorter than one training window")

    def batch(step: int):
        starts = np.random.default_rng([seed, step]).integers(0, hi, batch_size)
        win = np.stack([flat[s:s + seq_len + 1] for s in starts])
        return win[:, :-1], win[:, 1:], None
    return batch


def evaluate_ppl(store, cfg, tokens: np.ndarray, seq_len: int, n_tokens: int | None = None,
                 batch_size: int = 8) -> float:
    """Perplexity over consecutive non-overlapping windows of ``seq_len`` predictions."""
    from .model import forward_lm

    flat = np.asarray(tokens).reshape(-1)
    n_win = (flat.size - 1) // seq_len
    if n_tokens is not None:
        n_win = min(n_win, max(1, n_tokens // seq_len))
    if n_win < 1:
        raise ValueError("held-out corpus shorter than one evaluation window")
    total, count = 0.0, 0
    for i in range(0, n_win, batch_size):
        wins = np.stack([flat[j * seq_len:j * seq_len + seq_len + 1] for j in range(i, min(n_win, i + batch_size))])
        logits = forward_lm(store, cfg, wins[:, :-1]).astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        total -= np.take_along_axis(logp, wins[:, 1:, None], axis=-1).sum()
        count += wins.shape[0] * seq_len
    return float(math.exp(total / count))


def length_extrapolation_eval(store, cfg, tokens: np.ndarray, train_len: int, eval_lens, n_tokens: int = 4096):
    """``[(eval_len, ppl), ...]`` on held-out text, same token budget per length."""
    rows = []
    for L in eval_lens:
        if L < train_len:
            raise ValueError(f"eval length {L} is shorter than the training length {train_len}")
        rows.append((L, evaluate_ppl(store, cfg, tokens, L, n_tokens)))
    return rows
