"""``latte`` command line: verify, train, bench, diagnose.

Exit codes: 0 success, 1 a check or metric failed, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .model import MIXER_KINDS, LATTE_FAMILY, ModelConfig, TrainingDiverged, build_model, latent_usage, train
from .tasks import MQARConfig, evaluate_mqar, evaluate_ppl, generate_mqar, lm_batches, mqar_batches, synthetic_text

log = logging.getLogger("latte")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# harness keys a run config may carry besides ModelConfig / MQARConfig fields
HARNESS_KEYS = {
    "eval_every": 250,
    "eval_examples": 1000,   # MQAR test examples used for periodic evals; the final eval uses all of them
    "stop_at": None,         # stop once the periodic eval metric reaches this value
    "corpus": None,          # text task: path to a byte corpus; synthetic prose when unset
    "corpus_bytes": 400_000,
    "eval_tokens": 8192,
}
# desk-scale model defaults for ``latte train``; the library defaults follow the paper's table
TRAIN_DEFAULTS = {"n_layers": 2, "n_heads": 2, "d_model": 64, "d_ff": 128, "n_latents": 64, "window": 16,
                  "dropout": 0.0, "warmup_steps": 100, "batch_size": 32, "learning_rate": 1e-3, "seq_len": 64,
                  "vocab_size": 64, "total_steps": 2000}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run config files

def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def read_run_config(path: str) -> dict:
    """JSON object or ``key = value`` lines (``#`` comments); unknown keys are rejected."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    else:
        data = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
            data[key.strip()] = _parse_value(value)
    known = ({f.name for f in dataclasses.fields(ModelConfig)} | {f.name for f in dataclasses.fields(MQARConfig)}
             | set(HARNESS_KEYS))
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return data


def build_run(raw: dict, task: str, overrides: dict):
    """Split a flat run config into (ModelConfig, MQARConfig or None, harness dict, digest)."""
    raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    mqar_fields = {f.name for f in dataclasses.fields(MQARConfig)}
    model_kw = {**TRAIN_DEFAULTS, **{k: v for k, v in raw.items() if k in model_fields}}
    harness = {**HARNESS_KEYS, **{k: v for k, v in raw.items() if k in HARNESS_KEYS}}
    mqar = None
    if task == "mqar":
        mqar_kw = {k: v for k, v in raw.items() if k in mqar_fields}
        mqar_kw.setdefault("vocab_size", model_kw["vocab_size"])
        mqar_kw.setdefault("seq_len", model_kw["seq_len"])
        mqar_kw.setdefault("seed", model_kw.get("seed", 0))
        mqar = MQARConfig(**mqar_kw)
        model_kw["vocab_size"], model_kw["seq_len"] = mqar.vocab_size, mqar.seq_len
    else:
        model_kw["vocab_size"] = 256
    try:
        cfg = ModelConfig(**model_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    blob = {"task": task, "model": cfg.to_dict(), "mqar": dataclasses.asdict(mqar) if mqar else None,
            "harness": harness}
    digest = hashlib.sha256(json.dumps(blob, sort_keys=True, default=str).encode()).hexdigest()
    return cfg, mqar, harness, digest


# ---------------------------------------------------------------------------
# commands

def cmd_verify(args) -> int:
    from .verify import format_table, parse_tol_overrides, run_verify, verify_digest, write_report

    try:
        overrides = parse_tol_overrides(args.tol_overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    only = set(args.only.split(",")) if args.only else None
    results = run_verify(args.precision, args.seed, overrides, args.break_stabilization, only)
    print(format_table(results))
    if args.report:
        write_report(args.report, results, verify_digest(args.precision, args.seed, overrides,
                                                         args.break_stabilization))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_train(args) -> int:
    from .model import write_metrics_csv

    raw = read_run_config(args.config) if args.config else {}
    cfg, mqar, harness, digest = build_run(raw, args.task, {"mixer_kind": args.mixer, "seed": args.seed,
                                                            "learning_rate": args.lr,
                                                            "eval_every": args.eval_every})
    steps = args.steps if args.steps is not None else cfg.total_steps
    if steps < 0:
        raise UsageError("--steps must be non-negative")
    os.makedirs(args.out, exist_ok=True)
    store = build_model(cfg)

    if args.task == "mqar":
        train_ds = generate_mqar(mqar, "train")
        test_ds = generate_mqar(mqar, "test")
        periodic = test_ds.subset(min(len(test_ds), int(harness["eval_examples"])))
        batches = mqar_batches(train_ds, cfg.batch_size, cfg.seed)
        eval_fn = lambda s: evaluate_mqar(s, cfg, periodic)  # noqa: E731
        final_fn = lambda s: evaluate_mqar(s, cfg, test_ds)  # noqa: E731
        metric_name = "accuracy"
    else:
        if harness["corpus"]:
            with open(harness["corpus"], "rb") as fh:
                data = fh.read()
            if not data:
                raise UsageError(f"{harness['corpus']}: empty corpus")
        else:
            data = synthetic_text(int(harness["corpus_bytes"]), cfg.seed)
        tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int32)
        cut = int(tokens.size * 0.9)
        train_tok, held = tokens[:cut], tokens[cut:]
        batches = lm_batches(train_tok, cfg.seq_len, cfg.batch_size, cfg.seed)
        eval_fn = lambda s: evaluate_ppl(s, cfg, held, cfg.seq_len, int(harness["eval_tokens"]))  # noqa: E731
        final_fn = eval_fn
        metric_name = "ppl"

    ckpt = os.path.join(args.out, "checkpoint.latte")
    try:
        metrics, _ = train(store, cfg, batches, steps, eval_fn=eval_fn, eval_every=int(harness["eval_every"] or 0),
                           total_steps=max(steps, 1), checkpoint_path=ckpt, stop_at=harness["stop_at"],
                           log_every=args.log_every)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; state saved to {ckpt}", file=sys.stderr)
        return EXIT_FAIL
    final = final_fn(store)
    if metrics.rows:
        metrics.rows[-1]["task_metric"] = final
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), metrics.rows, digest)
    with open(os.path.join(args.out, "run_config.json"), "w") as fh:
        json.dump({"digest": digest, "task": args.task, "model": cfg.to_dict(),
                   "mqar": dataclasses.asdict(mqar) if mqar else None, "harness": harness}, fh, indent=2,
                  sort_keys=True)
    print(f"final {metric_name}: {final:.6f} after {metrics.final_step} steps")
    if not np.isfinite(final):
        return EXIT_FAIL
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from exc
    if not vals or any(v < 1 for v in vals):
        raise UsageError("sequence lengths must be positive")
    return vals


def cmd_bench(args) -> int:
    from .bench import BENCH_MIXERS, BenchConfig, BudgetError, fit_slopes, run_bench, write_bench_csv

    seq_lens = _int_list(args.seq_lens)
    mixers = [m.strip() for m in args.mixers.split(",") if m.strip()]
    bad = [m for m in mixers if m not in BENCH_MIXERS]
    if bad or not mixers:
        raise UsageError(f"unknown mixer(s) {', '.join(bad) or '(none)'}; choose from {', '.join(BENCH_MIXERS)}")
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    cfg = BenchConfig(d_model=args.d_model, heads=args.heads, n_latents=args.n_latents, window=args.window,
                      token_budget=args.token_budget or max(seq_lens), repeat=args.repeat, warmup=args.warmup,
                      precision=args.precision, seed=args.seed, max_bytes=int(args.max_mib * 2 ** 20))
    try:
        rows = run_bench(mixers, seq_lens, cfg, log=print)
    except BudgetError as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_USAGE
    slopes = fit_slopes(rows)
    for mixer, s in slopes.items():
        print(f"slope {mixer}: {s:.3f}")
    if args.out:
        write_bench_csv(args.out, rows, slopes, cfg.digest())
    return EXIT_OK


def _read_tokens(path: str, vocab_size: int) -> np.ndarray:
    if path.endswith(".npy"):
        ids = np.load(path).astype(np.int64).reshape(-1)
    else:
        with open(path, "rb") as fh:
            data = fh.read()
        ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    if ids.size == 0:
        raise UsageError(f"{path}: empty input")
    if ids.max() >= vocab_size:
        raise UsageError(f"{path}: token id {int(ids.max())} outside the model vocabulary ({vocab_size})")
    return ids


def cmd_diagnose(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .core import usage_entropy

    try:
        store, cfg, _, _ = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise UsageError(str(exc)) from exc
    if cfg.mixer_kind not in LATTE_FAMILY:
        raise UsageError(f"checkpoint mixer {cfg.mixer_kind!r} is not Latte-family; nothing to diagnose")
    ids = _read_tokens(args.input, cfg.vocab_size)
    if args.max_len:
        ids = ids[: args.max_len]
    layers = latent_usage(store, cfg, ids[None])
    macchiato = cfg.mixer_kind.startswith("macchiato")
    with open(args.out, "w", newline="") as fh:
        fh.write(f"# config_digest={cfg.digest()}\n")
        w = csv.writer(fh)
        w.writerow(["layer", "head", "t", "l", "prob"])
        for li, post in enumerate(layers):
            _, H, T, S = post.shape
            for h in range(H):
                for t in range(T):
                    for l in range(S):
                        w.writerow([li, h, t, l, f"{post[0, h, t, l]:.8g}"])
    summary = os.path.splitext(args.out)[0] + "_entropy.csv"
    flagged = 0
    with open(summary, "w", newline="") as fh:
        fh.write(f"# config_digest={cfg.digest()}\n")
        w = csv.writer(fh)
        w.writerow(["layer", "head", "entropy", "max_entropy", "collapse"])
        for li, post in enumerate(layers):
            ent = usage_entropy(post)
            # collapse judged over the latent slots; Macchiato's window state is reported but not counted
            n_lat = post.shape[-1] - 1 if macchiato else post.shape[-1]
            lat = post[..., 1:] if macchiato else post
            lat_ent = usage_entropy(lat) if n_lat > 0 else np.zeros(post.shape[1])
            threshold = 0.1 * np.log(max(n_lat, 1))
            for h in range(post.shape[1]):
                collapse = bool(n_lat > 1 and lat_ent[h] < threshold)
                flagged += collapse
                w.writerow([li, h, f"{ent[h]:.6f}", f"{np.log(post.shape[-1]):.6f}", int(collapse)])
                print(f"layer {li} head {h}: usage entropy {ent[h]:.3f} / {np.log(post.shape[-1]):.3f}"
                      + ("  COLLAPSE" if collapse else ""))
    print(f"{flagged} collapse candidate(s); rows in {args.out}, summary in {summary}")
    return EXIT_OK


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latte", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--precision", choices=("f32", "f64"), default="f64")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tol-overrides", default=None, help="name=value,... per-check tolerance overrides")
    v.add_argument("--break-stabilization", action="store_true",
                   help="fault injection: run the scan without the running-max shift")
    v.add_argument("--only", default=None, help="comma-separated subset of checks")
    v.add_argument("--report", default="verify_report.csv", help="CSV report path ('' to skip)")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train a small model on MQAR or byte-level text")
    t.add_argument("--config", default=None, help="key=value or JSON run config")
    t.add_argument("--task", choices=("mqar", "text"), default="mqar")
    t.add_argument("--mixer", choices=MIXER_KINDS, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--eval-every", type=int, default=None)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="forward-pass runtime at a constant token budget")
    b.add_argument("--seq-lens", default="512,1024,2048,4096,8192")
    b.add_argument("--mixers", default="latte,attention")
    b.add_argument("--d-model", type=int, default=256)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--n-latents", type=int, default=128)
    b.add_argument("--window", type=int, default=128)
    b.add_argument("--token-budget", type=int, default=None, help="tokens per call (default: largest T)")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--precision", choices=("f32", "f64"), default="f32")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--max-mib", type=float, default=2048.0, help="reject cells estimated above this working set")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("diagnose", help="dump p(l|t) per layer and head from a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True, help="text file (bytes) or .npy token array")
    d.add_argument("--out", required=True)
    d.add_argument("--max-len", type=int, default=0)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "log_every", 0) else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"latte {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
