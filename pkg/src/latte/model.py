"""Language models built from the mixers, their gradients and the training loop.

A model is a flat :class:`ParameterStore` of named arrays plus a
:class:`ModelConfig`. Each block is pre-norm: ``x + mixer(norm(x))`` followed by
``x + ffn(norm(x))``. With ``plusplus`` the norm is RMSNorm and the FFN a gated
linear unit; otherwise LayerNorm and a GELU MLP.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ad
from .attention import rope_tables
from .macchiato import RGLRU_SHARPNESS
from .numerics import resolve_dtype

log = logging.getLogger(__name__)

MIXER_KINDS = ("attention", "swa", "linear", "latte", "macchiato_conv", "macchiato_rglru")
LATTE_FAMILY = ("latte", "macchiato_conv", "macchiato_rglru")


class PositionTableExceeded(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 8
    d_model: int = 512
    d_ff: int = 2048
    n_latents: int = 256
    window: int = 128
    conv_size: int = 3
    dropout: float = 0.1
    learning_rate: float = 5e-4
    warmup_steps: int = 4000
    decay_schedule: str = "linear"
    weight_decay: float = 0.01
    seq_len: int = 512
    batch_size: int = 64
    unroll: int = 32
    mixer_kind: str = "latte"
    plusplus: bool = True
    vocab_size: int = 256
    seed: int = 0
    total_steps: int = 200_000
    positions: str = "learned"   # "learned" (absolute table), "rope" (attention-type mixers only) or "none"
    attn_scale: bool = True
    precision: str = "f32"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 0.0    # 0 disables global-norm clipping

    def __post_init__(self):
        if self.mixer_kind not in MIXER_KINDS:
            raise ValueError(f"unknown mixer kind {self.mixer_kind!r}; expected one of {', '.join(MIXER_KINDS)}")
        if self.positions not in ("rope", "learned", "none"):
            raise ValueError(f"unknown position scheme {self.positions!r}")
        if self.decay_schedule not in ("linear", "constant", "cosine"):
            raise ValueError(f"unknown decay schedule {self.decay_schedule!r}")
        for name in ("n_heads", "d_model", "d_ff", "window", "conv_size", "seq_len", "batch_size", "unroll",
                     "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0 or self.n_latents < 0:
            raise ValueError("n_layers and n_latents must be non-negative")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")
        if self.mixer_kind in LATTE_FAMILY + ("linear",) and self.n_latents % self.n_heads:
            raise ValueError("n_heads must divide n_latents")
        if (self.d_model // self.n_heads) % 2 and self.mixer_kind in ("attention", "swa", "macchiato_conv",
                                                                      "macchiato_rglru"):
            raise ValueError("rotary encoding needs an even per-head width")
        self.adam_betas = tuple(self.adam_betas)
        resolve_dtype(self.precision)

    @property
    def dtype(self):
        return resolve_dtype(self.precision)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


class ParameterStore(dict):
    """Ordered mapping of parameter name to array."""

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def mixer_names(self) -> list[str]:
        return [k for k in self if ".mixer." in k]


# ---------------------------------------------------------------------------
# initialization

def _mixer_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    D, L, H = cfg.d_model, cfg.n_latents, cfg.n_heads
    kind = cfg.mixer_kind
    if kind in ("attention", "swa"):
        return {"W_q": (D, D), "W_k": (D, D), "W_v": (D, D), "W_o": (D, D)}
    shapes = {"W_q": (D, L), "W_k": (D, L), "W_v": (D, D), "W_o": (D, D)}
    if kind.startswith("macchiato"):
        shapes.update({"gate_0": (D, H), "swa_W_q": (D, D), "swa_W_k": (D, D)})
    if kind == "macchiato_conv":
        shapes["conv"] = (cfg.conv_size, D)
    if kind == "macchiato_rglru":
        shapes.update({"rglru_W_input": (D, D), "rglru_W_rec": (D, D), "rglru_log_decay": (D,)})
    return shapes


def build_model(cfg: ModelConfig, seed: int | None = None) -> ParameterStore:
    """Deterministic initialization: normal(0, 0.02) projections, unit norm scales."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.dtype
    D = cfg.d_model
    store = ParameterStore()

    def normal(shape, std=0.02):
        return rng.normal(0.0, std, shape).astype(dt)

    def norm_params(prefix):
        store[f"{prefix}.scale"] = np.ones(D, dtype=dt)
        if not cfg.plusplus:
            store[f"{prefix}.bias"] = np.zeros(D, dtype=dt)

    store["embed"] = normal((cfg.vocab_size, D))
    if cfg.positions == "learned":
        store["pos_embed"] = normal((cfg.seq_len, D))
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        norm_params(f"{p}.norm1")
        for name, shape in _mixer_shapes(cfg).items():
            if name == "conv":
                kernel = np.zeros(shape, dtype=dt)
                kernel[0] = 1.0
                store[f"{p}.mixer.conv"] = kernel + normal(shape)
            elif name == "rglru_log_decay":
                a = rng.uniform(0.9 ** (1 / RGLRU_SHARPNESS), 0.999 ** (1 / RGLRU_SHARPNESS), shape)
                store[f"{p}.mixer.{name}"] = np.log(a / (1 - a)).astype(dt)
            else:
                store[f"{p}.mixer.{name}"] = normal(shape)
        norm_params(f"{p}.norm2")
        if cfg.plusplus:
            store[f"{p}.ffn.W_gate"] = normal((D, cfg.d_ff))
            store[f"{p}.ffn.W_up"] = normal((D, cfg.d_ff))
            store[f"{p}.ffn.W_down"] = normal((cfg.d_ff, D))
        else:
            store[f"{p}.ffn.W_in"] = normal((D, cfg.d_ff))
            store[f"{p}.ffn.b_in"] = np.zeros(cfg.d_ff, dtype=dt)
            store[f"{p}.ffn.W_out"] = normal((cfg.d_ff, D))
            store[f"{p}.ffn.b_out"] = np.zeros(D, dtype=dt)
    norm_params("final_norm")
    store["head.W"] = normal((D, cfg.vocab_size))
    return store


# ---------------------------------------------------------------------------
# forward

def _norm(P, prefix, x, cfg):
    if cfg.plusplus:
        return ad.rmsnorm(x, P[f"{prefix}.scale"])
    return ad.layernorm(x, P[f"{prefix}.scale"], P[f"{prefix}.bias"])


def _heads(x, H):
    """(B, T, F) -> (B, T, H, F/H)."""
    B, T, F = x.shape
    return ad.reshape(x, (B, T, H, F // H))


def _attend(q, k, v, T, cfg: ModelConfig, window: int | None, use_rope: bool):
    """Causal (optionally windowed) softmax attention on (B, T, H, d) tensors -> (B, T, H, dv)."""
    q = ad.transpose(q, (0, 2, 1, 3))
    k = ad.transpose(k, (0, 2, 1, 3))
    v = ad.transpose(v, (0, 2, 1, 3))
    if use_rope:
        cos, sin = rope_tables(np.arange(T), q.shape[-1], dtype=q.dtype)
        q = ad.rope(q, cos, sin)
        k = ad.rope(k, cos, sin)
    logits = q @ ad.transpose(k, (0, 1, 3, 2))
    if cfg.attn_scale:
        logits = logits * (1.0 / math.sqrt(q.shape[-1]))
    t = np.arange(T)[:, None]
    s = np.arange(T)[None, :]
    mask = s <= t
    if window is not None:
        mask &= s >= t - window
    probs = ad.masked_softmax(logits, mask)
    return ad.transpose(probs @ v, (0, 2, 1, 3))


def _rglru(P, p, x):
    r = ad.sigmoid(x @ P[f"{p}.rglru_W_rec"])
    i = ad.sigmoid(x @ P[f"{p}.rglru_W_input"])
    log_a = r * (ad.softplus(-P[f"{p}.rglru_log_decay"]) * (-RGLRU_SHARPNESS))
    a = ad.exp(log_a)
    scale = ad.sqrt(1.0 - a * a)
    return ad.recurrence(a, scale * (i * x))


def _mixer(P, i, x, cfg: ModelConfig, probe: list | None = None):
    p = f"layers.{i}.mixer"
    B, T, D = x.shape
    H = cfg.n_heads
    kind = cfg.mixer_kind
    use_rope = cfg.positions == "rope"
    if kind in ("attention", "swa"):
        q = _heads(x @ P[f"{p}.W_q"], H)
        k = _heads(x @ P[f"{p}.W_k"], H)
        v = _heads(x @ P[f"{p}.W_v"], H)
        out = _attend(q, k, v, T, cfg, cfg.window if kind == "swa" else None, use_rope)
    elif kind == "linear":
        ql = _heads(x @ P[f"{p}.W_q"], H)
        kl = _heads(x @ P[f"{p}.W_k"], H)
        v = ad.transpose(_heads(x @ P[f"{p}.W_v"], H), (0, 2, 1, 3))
        _check_linear_range(kl.data)
        # per-query shift cancels in the ratio; keys stay unshifted as in the plain recursion
        phq = ad.exp(ql - ql.data.max(axis=-1, keepdims=True))
        phk = ad.exp(kl)
        scores = ad.transpose(phq, (0, 2, 1, 3)) @ ad.transpose(phk, (0, 2, 3, 1))
        scores = scores * np.tril(np.ones((T, T), dtype=x.dtype))
        weights = scores / ad.sum_(scores, axis=-1, keepdims=True)
        out = ad.transpose(weights @ v, (0, 2, 1, 3))
    elif kind == "latte":
        qprob = ad.softmax(_heads(x @ P[f"{p}.W_q"], H), axis=-1)
        if probe is not None:
            probe.append(qprob.data.transpose(0, 2, 1, 3))
        kl = _heads(x @ P[f"{p}.W_k"], H)
        v = _heads(x @ P[f"{p}.W_v"], H)
        out = ad.latte_mix(qprob, kl, v, cfg.unroll)
    else:
        y = ad.causal_conv(x, P[f"{p}.conv"]) if kind == "macchiato_conv" else _rglru(P, p, x)
        Lh = cfg.n_latents // H
        gate_logits = ad.concat([ad.reshape(y @ P[f"{p}.gate_0"], (B, T, H, 1)),
                                 _heads(y @ P[f"{p}.W_q"], H)], axis=-1)
        gate = ad.softmax(gate_logits, axis=-1)
        if probe is not None:
            probe.append(gate.data.transpose(0, 2, 1, 3))
        v = _heads(x @ P[f"{p}.W_v"], H)
        q0 = _heads(x @ P[f"{p}.swa_W_q"], H)
        k0 = _heads(x @ P[f"{p}.swa_W_k"], H)
        local = _attend(q0, k0, v, T, cfg, cfg.window, True)
        out = ad.slice_last(gate, 0, 1) * local
        if Lh:
            kl = _heads(y @ P[f"{p}.W_k"], H)
            out = out + ad.latte_mix(ad.slice_last(gate, 1, Lh + 1), kl, v, cfg.unroll)
    return ad.reshape(out, (B, T, D)) @ P[f"{p}.W_o"]


def _check_linear_range(kl: np.ndarray):
    limit = 30.0 if kl.dtype == np.float32 else 300.0
    worst = float(np.abs(kl).max())
    if worst > limit:
        raise FloatingPointError(f"linear attention key logits reach {worst:.1f} > {limit}; "
                                 "the unshifted recursion would overflow")


def _ffn(P, i, x, cfg):
    p = f"layers.{i}.ffn"
    if cfg.plusplus:
        return (ad.silu(x @ P[f"{p}.W_gate"]) * (x @ P[f"{p}.W_up"])) @ P[f"{p}.W_down"]
    return ad.gelu(x @ P[f"{p}.W_in"] + P[f"{p}.b_in"]) @ P[f"{p}.W_out"] + P[f"{p}.b_out"]


def _dropout(x, rate, rng):
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def forward(P: dict, cfg: ModelConfig, ids: np.ndarray, train: bool = False, rng=None, probe: list | None = None):
    """Logits as an autograd tensor. ``P`` maps names to arrays or :class:`Tensor` leaves.

    For Latte-family mixers, ``probe`` (a list) collects each layer's ``p(l|t)``
    as a ``(B, H, T, states)`` array; Macchiato's state 0 is the window branch.
    """
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    B, T = ids.shape
    if T < 1:
        raise ValueError("empty sequence")
    P = {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v) for k, v in P.items()}
    drop_rng = rng if train else None
    x = ad.embedding(P["embed"], ids)
    if cfg.positions == "learned":
        if T > P["pos_embed"].shape[0]:
            raise PositionTableExceeded(
                f"position table exceeded: sequence length {T} > learned table size {P['pos_embed'].shape[0]}")
        x = x + _rows(P["pos_embed"], T)
    for i in range(cfg.n_layers):
        x = x + _dropout(_mixer(P, i, _norm(P, f"layers.{i}.norm1", x, cfg), cfg, probe), cfg.dropout, drop_rng)
        x = x + _dropout(_ffn(P, i, _norm(P, f"layers.{i}.norm2", x, cfg), cfg), cfg.dropout, drop_rng)
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"non-finite activations after layer {i}")
    return _norm(P, "final_norm", x, cfg) @ P["head.W"]


def _rows(table, T):
    W = table.data

    def back(g):
        full = np.zeros_like(W)
        full[:T] = g.reshape(-1, T, W.shape[1]).sum(axis=0)
        return (full,)
    return ad._node(W[:T], (table,), back)


def forward_lm(store: ParameterStore, cfg: ModelConfig, token_ids: np.ndarray, train: bool = False,
               rng=None) -> np.ndarray:
    return forward(store, cfg, token_ids, train=train, rng=rng).data


def latent_usage(store: ParameterStore, cfg: ModelConfig, token_ids: np.ndarray) -> list[np.ndarray]:
    """Per-layer ``p(l|t)`` arrays ``(B, H, T, states)`` for a Latte-family model."""
    if cfg.mixer_kind not in LATTE_FAMILY:
        raise ValueError(f"mixer kind {cfg.mixer_kind!r} has no latent states to diagnose")
    probe: list = []
    forward(store, cfg, token_ids, probe=probe)
    return probe


def loss_and_grads(store: ParameterStore, cfg: ModelConfig, ids: np.ndarray, targets: np.ndarray,
                   mask: np.ndarray | None = None, rng=None, train: bool = True, scale: float = 1.0):
    """Masked mean cross-entropy and ``{name: gradient}`` for every parameter."""
    leaves = {k: ad.param(v, k) for k, v in store.items()}
    with ad.GradientTape() as tape:
        logits = forward(leaves, cfg, ids, train=train, rng=rng)
        loss = ad.cross_entropy(logits, np.asarray(targets), mask)
        loss = ad.mul(loss, scale) if scale != 1.0 else loss
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    grads = tape.gradient(loss, leaves)
    return float(loss.data), grads


def loss_only(store, cfg, ids, targets, mask=None) -> float:
    logits = forward(store, cfg, ids)
    return float(ad.cross_entropy(logits, np.asarray(targets), mask).data)


# ---------------------------------------------------------------------------
# optimization

def lr_at(step: int, cfg: ModelConfig, total_steps: int | None = None) -> float:
    """Linear warmup to ``learning_rate``, then the configured decay to zero at ``total_steps``."""
    total = cfg.total_steps if total_steps is None else total_steps
    base = cfg.learning_rate
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return base * (step + 1) / cfg.warmup_steps
    if cfg.decay_schedule == "constant" or total <= cfg.warmup_steps:
        return base
    frac = min(1.0, (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps))
    if cfg.decay_schedule == "cosine":
        return base * 0.5 * (1.0 + np.cos(np.pi * frac))
    return base * (1.0 - frac)


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_update(store: ParameterStore, grads: dict, opt: AdamWState, lr: float, cfg: ModelConfig):
    b1, b2 = cfg.adam_betas
    opt.step += 1
    if cfg.grad_clip > 0:
        norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in store.items():
        g = grads[name]
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if p.ndim >= 2 and cfg.weight_decay:
            p -= (lr * cfg.weight_decay) * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


@dataclass
class TrainMetrics:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)   # (step, metric)
    rows: list = field(default_factory=list)    # CSV rows
    final_step: int = 0
    diverged: bool = False

    @property
    def final_metric(self):
        return self.evals[-1][1] if self.evals else None


METRIC_COLUMNS = ("step", "loss", "lr", "task_metric", "wallclock_ms")


def write_metrics_csv(path: str, rows: list, digest: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={digest}\n")
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"], repr(r["loss"]), repr(r["lr"]),
                        "" if r["task_metric"] is None else repr(r["task_metric"]), r["wallclock_ms"]])


def train(store: ParameterStore, cfg: ModelConfig, batches: Callable[[int], tuple], steps: int,
          eval_fn: Callable[[ParameterStore], float] | None = None, eval_every: int = 0,
          opt: AdamWState | None = None, start_step: int = 0, total_steps: int | None = None,
          checkpoint_path: str | None = None, metrics_path: str | None = None,
          stop_at: float | None = None, log_every: int = 0) -> tuple[TrainMetrics, AdamWState]:
    """Run ``steps`` AdamW updates starting at ``start_step``.

    ``batches(step)`` returns ``(ids, targets, mask)`` and must be a pure function
    of the step index so that a resumed run sees the same data. Dropout masks
    are seeded from ``(cfg.seed, step)`` for the same reason. ``stop_at`` ends
    training early once the eval metric reaches that value.
    """
    from .checkpoint import save_checkpoint

    opt = AdamWState() if opt is None else opt
    metrics = TrainMetrics()
    total = cfg.total_steps if total_steps is None else total_steps
    t_start = time.monotonic()
    step = start_step
    for step in range(start_step, start_step + steps):
        ids, targets, mask = batches(step)
        rng = np.random.default_rng([cfg.seed, step]) if cfg.dropout > 0 else None
        try:
            loss, grads = loss_and_grads(store, cfg, ids, targets, mask, rng=rng, train=True)
        except FloatingPointError as exc:
            metrics.diverged = True
            if checkpoint_path:
                save_checkpoint(checkpoint_path, store, cfg, step, opt)
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        lr = lr_at(step, cfg, total)
        adamw_update(store, grads, opt, lr, cfg)
        metrics.losses.append(loss)
        metric = None
        if eval_fn is not None and eval_every and (step + 1) % eval_every == 0:
            metric = float(eval_fn(store))
            metrics.evals.append((step + 1, metric))
        metrics.rows.append({"step": step + 1, "loss": loss, "lr": lr, "task_metric": metric,
                             "wallclock_ms": int((time.monotonic() - t_start) * 1000)})
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f lr %.2e%s", step + 1, loss, lr,
                     "" if metric is None else f" metric {metric:.4f}")
        if stop_at is not None and metric is not None and metric >= stop_at:
            break
    metrics.final_step = step + 1 if steps else start_step
    if metrics_path:
        write_metrics_csv(metrics_path, metrics.rows, cfg.digest())
    if checkpoint_path:
        save_checkpoint(checkpoint_path, store, cfg, metrics.final_step, opt)
    return metrics, opt
