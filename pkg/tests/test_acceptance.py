"""The twelve acceptance criteria, one test each, each printing a PASS/FAIL line.

Criteria 10 to 12 are empirical and slow; they are marked ``slow``.
"""
import time

import numpy as np
import pytest

from latte.attention import CAUSAL, AttentionParams, sliding_window_attention, softmax_attention
from latte.bench import BenchConfig, fit_slopes, run_bench
from latte.cli import TRAIN_DEFAULTS
from latte.core import (LatteParams, LatteState, latte_bidirectional, latte_causal_bruteforce, latte_causal_scan,
                        latte_step)
from latte.linear import FeatureMap, linear_attention_direct, undirected_attention_probs
from latte.macchiato import MacchiatoParams, macchiato_forward, macchiato_params_without_latents
from latte.model import ModelConfig, PositionTableExceeded, build_model, loss_and_grads, loss_only, train
from latte.tasks import (MQARConfig, evaluate_mqar, generate_mqar, length_extrapolation_eval, lm_batches,
                         mqar_batches, synthetic_text)
from latte.verify import run_verify


def _latte_inputs(seed, dtype, B=2, T=64, D=32, L=16, heads=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, T, D)).astype(dtype)
    return x, LatteParams.random(rng, D, L, heads=heads, dtype=dtype)


def _row_error(p):
    return float(np.abs(p.sum(axis=-1) - 1.0).max())


def test_c01_scan_matches_bruteforce(criterion):
    t0 = time.perf_counter()
    errs = {}
    for dtype in (np.float32, np.float64):
        x, p = _latte_inputs(0, dtype)
        ref = latte_causal_bruteforce(x.astype(np.float64), LatteParams(*(m.astype(np.float64) for m in
                                                                          (p.W_q, p.W_k, p.W_v)), heads=2))[0]
        errs[dtype] = float(np.abs(latte_causal_scan(x, p) - ref).max())
    secs = time.perf_counter() - t0
    ok = errs[np.float32] <= 1e-4 and errs[np.float64] <= 1e-9 and secs < 5.0
    criterion(1, ok, f"scan vs brute force: f32 {errs[np.float32]:.2e} (<=1e-4), "
                     f"f64 {errs[np.float64]:.2e} (<=1e-9), {secs:.2f}s (<5s)")
    assert ok


def test_c02_streaming_bit_identical(criterion):
    same = []
    for dtype in (np.float32, np.float64):
        x, p = _latte_inputs(1, dtype)
        state = LatteState.empty(x.shape[0], p)
        outs = []
        for t in range(x.shape[1]):
            state, y = latte_step(state, x[:, t], p)
            outs.append(y)
        same.append(np.array_equal(np.stack(outs, axis=1), latte_causal_scan(x, p)))
    ok = all(same)
    criterion(2, ok, f"latte_step over T=64 bit-identical to the scan (f32 {same[0]}, f64 {same[1]})")
    assert ok


def test_c03_undirected_equivalence(criterion):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 32, 8))
        params = AttentionParams.random(rng, 8, 8, heads=1)
        fm = FeatureMap(rng.normal(0, 1 / np.sqrt(8), (8, 4)))
        worst = max(worst, float(np.abs(undirected_attention_probs(x, params, fm)
                                        - linear_attention_direct(x, params, fm)[1]).max()))
    ok = worst <= 1e-10
    criterion(3, ok, f"undirected marginal vs linear-attention weights, 100 seeds: {worst:.2e} (<=1e-10)")
    assert ok


def _all_attention_matrices(dtype):
    rng = np.random.default_rng(3)
    T, D = 24, 16
    x = rng.normal(size=(2, T, D)).astype(dtype)
    ap = AttentionParams.random(rng, D, D, heads=2, dtype=dtype)
    fm = FeatureMap(rng.normal(0, 0.25, (8, 4)).astype(dtype))
    lp = LatteParams.random(rng, D, 8, heads=2, dtype=dtype)
    mp = MacchiatoParams.random(rng, D, 8, heads=2, window=6, feature_mode="rglru", dtype=dtype)
    return {
        "softmax": softmax_attention(x, ap, CAUSAL)[1],
        "swa": sliding_window_attention(x, ap, 6)[1],
        "linear_undirected": undirected_attention_probs(x, ap, fm),
        "latte_oracle": latte_causal_bruteforce(x, lp)[1].probs,
        "macchiato_trace": macchiato_forward(x, mp, return_trace=True)[1],
    }


def test_c04_full_normalization(criterion):
    worst = {}
    for dtype, tol in ((np.float32, 1e-6), (np.float64, 1e-10)):
        errs = {k: _row_error(m) for k, m in _all_attention_matrices(dtype).items()}
        worst[dtype] = (max(errs.values()), tol, max(errs, key=errs.get))
    ok = all(w <= tol for w, tol, _ in worst.values())
    criterion(4, ok, "row sums of softmax, swa, linear-undirected, latte, macchiato: "
                     + ", ".join(f"{np.dtype(d).name} worst {w:.1e} ({name}, <={tol:.0e})"
                                 for d, (w, tol, name) in worst.items()))
    assert ok


def test_c05_mixture_degeneracies(criterion):
    rng = np.random.default_rng(5)
    T, D = 24, 16
    x = rng.normal(size=(2, T, D))
    p = MacchiatoParams.random(rng, D, 8, heads=2, window=6, feature_mode="rglru")
    empty = macchiato_params_without_latents(p)
    exact = all(np.array_equal(macchiato_forward(x, empty, return_trace=tr)[0],
                               sliding_window_attention(x, empty.value_params(), 6, return_probs=tr)[0])
                for tr in (True, False))
    # direct features, so the constant channel reaches the gate unchanged
    wide = MacchiatoParams.random(rng, D, 8, heads=2, window=T)
    xs = x.copy()
    xs[..., 0] = 1.0
    wide.gate_row_0[0] = 60.0
    wide.latte.W_q[0] = 0.0
    sat = float(np.abs(macchiato_forward(xs, wide)[0]
                       - softmax_attention(xs, wide.value_params(), CAUSAL, use_rope=True)[0]).max())
    ok = exact and sat <= 1e-6
    criterion(5, ok, f"L=0 equals SWA exactly: {exact}; saturated gate with w>=T vs causal attention "
                     f"{sat:.1e} (<=1e-6)")
    assert ok


def test_c06_stabilization_fault_injection(criterion):
    names = {"stabilized_scan_finite", "unshifted_recursion_overflows"}
    normal = {r.name: r for r in run_verify("f32", only=names)}
    broken = {r.name: r for r in run_verify("f32", only=names, break_stabilization=True)}
    ok = (normal["stabilized_scan_finite"].passed and normal["unshifted_recursion_overflows"].passed
          and not broken["stabilized_scan_finite"].passed)
    criterion(6, ok, f"logits at +-50 in f32: stabilized scan error {normal['stabilized_scan_finite'].measured:.1e}"
                     f", unshifted recursion overflows {normal['unshifted_recursion_overflows'].measured:.0f} "
                     f"entries; with the shift removed the scan check fails "
                     f"(error {broken['stabilized_scan_finite'].measured:.2g})")
    assert ok


def _fd_relative_errors(cfg):
    store = build_model(cfg)
    # at the 0.02 init scale some gradients sit near 1e-7, where eps=1e-6 round-off
    # (~1e-10 absolute) swamps the comparison; weights of order 0.3 keep it informative
    for k in store:
        if store[k].ndim >= 2:
            store[k] = store[k] * 15
    rng = np.random.default_rng(0)
    ids = rng.integers(0, cfg.vocab_size, (2, cfg.seq_len))
    targets = rng.integers(0, cfg.vocab_size, (2, cfg.seq_len))
    _, grads = loss_and_grads(store, cfg, ids, targets)
    eps = 1e-6
    out = {}
    for name, w in store.items():
        fd = np.zeros_like(w)
        for i in np.ndindex(w.shape):
            orig = w[i]
            w[i] = orig + eps
            up = loss_only(store, cfg, ids, targets)
            w[i] = orig - eps
            down = loss_only(store, cfg, ids, targets)
            w[i] = orig
            fd[i] = (up - down) / (2 * eps)
        denom = max(np.abs(grads[name]).max(), np.abs(fd).max(), 1e-30)
        out[name] = float(np.abs(grads[name] - fd).max() / denom)
    return out


def test_c07_gradients_match_finite_differences(criterion):
    worst = {}
    for kind in ("attention", "linear", "latte", "macchiato_conv", "macchiato_rglru"):
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=8, n_latents=4, window=3, vocab_size=7, seq_len=8,
                          mixer_kind=kind, dropout=0.0, precision="f64")
        errs = _fd_relative_errors(cfg)
        group = max(errs, key=errs.get)
        worst[kind] = (errs[group], group)
    ok = all(e <= 1e-5 for e, _ in worst.values())
    criterion(7, ok, "every parameter, every coordinate, eps 1e-6: "
                     + ", ".join(f"{k} {e:.1e}" for k, (e, _) in worst.items()) + " (<=1e-5)")
    assert ok


def test_c08_rank_bound(criterion):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 32, 16))
    p = LatteParams.random(rng, 16, 4, heads=1)
    probs = latte_bidirectional(x, p, return_trace=True)[1]["probs"][0, 0]
    s = np.linalg.svd(probs, compute_uv=False)
    ratio = float(s[4] / s[0])
    ok = ratio <= 1e-6
    criterion(8, ok, f"bidirectional T=32, L=4: sigma5/sigma1 = {ratio:.1e} (<=1e-6)")
    assert ok


def _prefix_shuffled(x, t, rng):
    # an identity draw would not test anything, so redraw until the prefix actually moves
    perm = rng.permutation(t)
    while t > 1 and np.all(perm == np.arange(t)):
        perm = rng.permutation(t)
    y = x.copy()
    y[:, :t] = x[:, perm]
    return y


def test_c09_positional_information(criterion):
    worst = 0.0
    for seed in range(20):
        x, p = _latte_inputs(100 + seed, np.float64, B=1, T=24, D=16, L=8)
        rng = np.random.default_rng(seed)
        t = int(rng.integers(2, 24))
        y = _prefix_shuffled(x, t, rng)
        worst = max(worst, float(np.abs(latte_causal_scan(x, p)[:, t] - latte_causal_scan(y, p)[:, t]).max()))
    broken = {}
    for mode in ("conv", "rglru"):
        count = 0
        for seed in range(100):
            rng = np.random.default_rng([9, seed])
            x = rng.normal(size=(1, 12, 8))
            # the window spans the whole sequence without rotary phase, so only the features carry position
            p = MacchiatoParams.random(rng, 8, 4, heads=1, window=32, feature_mode=mode, conv_size=3,
                                       use_rope_in_swa=False)
            t = int(rng.integers(3, 12))
            y = _prefix_shuffled(x, t, rng)
            count += float(np.abs(macchiato_forward(x, p)[0][:, t] - macchiato_forward(y, p)[0][:, t]).max()) > 1e-3
        broken[mode] = count
    ok = worst <= 1e-6 and all(c >= 95 for c in broken.values())
    criterion(9, ok, f"causal Latte prefix-permutation change {worst:.1e} (<=1e-6); broken by conv(K=3) "
                     f"{broken['conv']}/100, rglru {broken['rglru']}/100 (>=95)")
    assert ok


# ---------------------------------------------------------------------------
# empirical criteria

MQAR_LRS = (1e-3, 5e-4, 1e-4)   # the sweep set, largest first
MQAR_SEEDS = (0, 1, 2)
MQAR_STEPS = 20_000
MQAR_EVAL_EVERY = 500
MQAR_BUDGET_S = 30 * 60


class _OutOfTime(Exception):
    pass


def _mqar_model(kind, lr, seed):
    kw = {k: v for k, v in TRAIN_DEFAULTS.items() if k not in ("learning_rate", "total_steps")}
    return ModelConfig(**{**kw, "mixer_kind": kind, "learning_rate": lr, "seed": seed, "total_steps": MQAR_STEPS})


@pytest.mark.slow
def test_c10_mqar_desk_scale(criterion):
    """Best of three learning rates, averaged over three seeds, for both mixers, inside thirty minutes.

    A learning rate whose three-seed mean already clears 0.90 settles the "best of"
    question for that mixer, so the remaining rates are skipped.
    """
    mq = MQARConfig(vocab_size=64, seq_len=64, num_pairs=4)
    train_ds, test_ds = generate_mqar(mq, "train"), generate_mqar(mq, "test")
    periodic = test_ds.subset(1000)
    t0 = time.monotonic()
    best, log = {}, []

    def periodic_eval(store, cfg):
        acc = evaluate_mqar(store, cfg, periodic)
        if time.monotonic() - t0 > MQAR_BUDGET_S:
            raise _OutOfTime(acc)
        return acc

    try:
        for kind in ("attention", "macchiato_rglru"):
            best[kind] = 0.0
            for lr in MQAR_LRS:
                accs = []
                for seed in MQAR_SEEDS:
                    cfg = _mqar_model(kind, lr, seed)
                    store = build_model(cfg)
                    m, _ = train(store, cfg, mqar_batches(train_ds, cfg.batch_size, seed), MQAR_STEPS,
                                 eval_fn=lambda s, c=cfg: periodic_eval(s, c), eval_every=MQAR_EVAL_EVERY,
                                 stop_at=0.95)
                    accs.append(evaluate_mqar(store, cfg, test_ds))
                    log.append(f"{kind} lr={lr:g} seed={seed}: {accs[-1]:.3f} after {m.final_step} steps")
                best[kind] = max(best[kind], float(np.mean(accs)))
                if best[kind] >= 0.90:
                    break
    except _OutOfTime as stop:
        log.append(f"stopped at the {MQAR_BUDGET_S // 60}-minute budget (last periodic accuracy "
                   f"{stop.args[0]:.3f})")
    elapsed = time.monotonic() - t0
    ok = (elapsed <= MQAR_BUDGET_S and len(best) == 2 and all(v >= 0.90 for v in best.values()))
    summary = ", ".join(f"{k} best mean {v:.3f}" for k, v in best.items()) or "no run finished"
    criterion(10, ok, f"MQAR (T=64, N=4, V=64): {summary} (>=0.90); {elapsed / 60:.1f} min (<=30); "
                      + "; ".join(log[-4:]))
    assert ok, "\n".join(log)


@pytest.mark.slow
def test_c11_runtime_scaling(criterion):
    cfg = BenchConfig(d_model=256, heads=4, n_latents=128, token_budget=8192, repeat=3, warmup=1)
    rows = run_bench(["latte", "attention"], [512, 1024, 2048, 4096, 8192], cfg)
    slopes = fit_slopes(rows)
    ok = 0.7 <= slopes["latte"] <= 1.3 and 1.7 <= slopes["attention"] <= 2.3
    criterion(11, ok, f"per-sequence time slope over T=512..8192, constant token budget: latte "
                      f"{slopes['latte']:.2f} (in [0.7, 1.3]), attention {slopes['attention']:.2f} (in [1.7, 2.3])")
    assert ok


EXTRAP_STEPS = 400


@pytest.mark.slow
def test_c12_length_extrapolation(criterion):
    data = np.frombuffer(synthetic_text(400_000), dtype=np.uint8).astype(np.int64)
    cut = int(0.9 * data.size)
    train_tok, held = data[:cut], data[cut:]
    base = dict(n_layers=2, n_heads=2, d_model=64, d_ff=128, n_latents=16, window=32, vocab_size=256, seq_len=256,
                batch_size=8, learning_rate=3e-3, warmup_steps=50, total_steps=EXTRAP_STEPS, dropout=0.0)
    results = {}
    for kind, positions in (("macchiato_rglru", "rope"), ("attention", "learned")):
        cfg = ModelConfig(**base, mixer_kind=kind, positions=positions)
        store = build_model(cfg)
        train(store, cfg, lm_batches(train_tok, 256, 8), EXTRAP_STEPS)
        try:
            rows = dict(length_extrapolation_eval(store, cfg, held, 256, [256, 1024], n_tokens=8192))
            results[kind] = rows[1024] / rows[256], rows
        except PositionTableExceeded as exc:
            results[kind] = None, str(exc)
    ratio, rows = results["macchiato_rglru"]
    base_ratio, base_info = results["attention"]
    base_ok = base_ratio is None or base_ratio > 2.0
    ok = ratio <= 1.25 and base_ok
    base_txt = f"errors by contract ({base_info})" if base_ratio is None else f"ratio {base_ratio:.2f} (>2)"
    criterion(12, ok, f"macchiato ppl@256 {rows[256]:.3f}, ppl@1024 {rows[1024]:.3f}, ratio {ratio:.3f} (<=1.25); "
                      f"learned-position attention {base_txt}")
    assert ok
