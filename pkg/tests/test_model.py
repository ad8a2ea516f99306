import numpy as np
import pytest

from latte.autograd import GradientTape, cross_entropy, param
from latte.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from latte.model import (LATTE_FAMILY, MIXER_KINDS, AdamWState, ModelConfig, PositionTableExceeded, build_model,
                         forward_lm, latent_usage, loss_and_grads, loss_only, lr_at, train, write_metrics_csv)
from latte.numerics import relative_error


def tiny(kind="latte", **kw):
    base = dict(n_layers=2, n_heads=2, d_model=8, d_ff=16, n_latents=4, window=3, conv_size=3, dropout=0.0,
                vocab_size=11, seq_len=8, batch_size=2, mixer_kind=kind, precision="f64", warmup_steps=2,
                total_steps=20, learning_rate=1e-2)
    base.update(kw)
    return ModelConfig(**base)


def _data(cfg, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, cfg.vocab_size, (2, cfg.seq_len))
    return ids, np.roll(ids, -1, axis=1)


def _fd_check(cfg, store, ids, targets, n_coords=6):
    """Relative error of reverse-mode vs central differences on sampled coordinates of every parameter."""
    _, grads = loss_and_grads(store, cfg, ids, targets)
    rng = np.random.default_rng(1)
    worst = {}
    for name, w in store.items():
        idx = [tuple(rng.integers(0, s) for s in w.shape) for _ in range(n_coords)]
        fd = []
        for i in idx:
            orig = w[i]
            w[i] = orig + 1e-6
            up = loss_only(store, cfg, ids, targets)
            w[i] = orig - 1e-6
            down = loss_only(store, cfg, ids, targets)
            w[i] = orig
            fd.append((up - down) / 2e-6)
        analytic = np.array([grads[name][i] for i in idx])
        fd = np.array(fd)
        denom = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-8)
        worst[name] = float(np.abs(analytic - fd).max() / denom)
    return worst


@pytest.mark.parametrize("kind", MIXER_KINDS)
@pytest.mark.parametrize("plusplus", [True, False])
def test_gradients_match_finite_differences(kind, plusplus):
    cfg = tiny(kind, plusplus=plusplus, positions="learned" if not plusplus else "rope")
    store = build_model(cfg)
    # larger weights so the test is not dominated by near-zero gradients
    for k in store:
        if store[k].ndim >= 2 and "rglru_log_decay" not in k:
            store[k] = store[k] * 15
    ids, targets = _data(cfg)
    worst = _fd_check(cfg, store, ids, targets)
    assert max(worst.values()) <= 1e-5, worst


def test_cross_entropy_by_hand():
    logits = param(np.log(np.array([[[1.0, 3.0]]])), "z")
    with GradientTape() as tape:
        loss = cross_entropy(logits, np.array([[1]]))
    assert abs(float(loss.data) + np.log(0.75)) < 1e-15
    g = tape.gradient(loss, {"z": logits})["z"]
    np.testing.assert_allclose(g[0, 0], [0.25, -0.25], atol=1e-15)


def test_fully_masked_loss_is_zero():
    cfg = tiny()
    store = build_model(cfg)
    ids, targets = _data(cfg)
    loss, grads = loss_and_grads(store, cfg, ids, targets, np.zeros(ids.shape, dtype=bool))
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.values())


@pytest.mark.parametrize("kind", MIXER_KINDS)
def test_end_to_end_causality(kind):
    cfg = tiny(kind)
    store = build_model(cfg)
    ids, _ = _data(cfg)
    other = ids.copy()
    other[:, 5:] = (other[:, 5:] + 3) % cfg.vocab_size
    assert np.array_equal(forward_lm(store, cfg, ids)[:, :5], forward_lm(store, cfg, other)[:, :5])


def test_mixer_swap_changes_only_mixer_parameters():
    names = {k: set(build_model(tiny(k))) for k in MIXER_KINDS}
    shared = {n for n in names["attention"] if ".mixer." not in n}
    for k, ns in names.items():
        assert {n for n in ns if ".mixer." not in n} == shared, k


def test_initialization_deterministic():
    a, b = build_model(tiny()), build_model(tiny())
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build_model(tiny(seed=1))
    assert not np.array_equal(a["embed"], c["embed"])
    assert np.all(a["layers.0.norm1.scale"] == 1.0)


def test_training_bitwise_deterministic_100_steps():
    cfg = tiny("macchiato_rglru", dropout=0.1, total_steps=100)
    rng = np.random.default_rng(0)
    data = rng.integers(0, cfg.vocab_size, (64, cfg.seq_len + 1))
    batches = lambda s: (data[s % 32 * 2:s % 32 * 2 + 2, :-1], data[s % 32 * 2:s % 32 * 2 + 2, 1:], None)  # noqa
    runs = []
    for _ in range(2):
        m, _ = train(build_model(cfg), cfg, batches, 100)
        runs.append(m.losses)
    assert runs[0] == runs[1]
    assert np.all(np.isfinite(runs[0]))


def test_resume_is_bit_identical(tmp_path):
    cfg = tiny("latte", dropout=0.1)
    rng = np.random.default_rng(1)
    data = rng.integers(0, cfg.vocab_size, (40, cfg.seq_len + 1))
    batches = lambda s: (data[s % 20 * 2:s % 20 * 2 + 2, :-1], data[s % 20 * 2:s % 20 * 2 + 2, 1:], None)  # noqa
    full_store = build_model(cfg)
    full, _ = train(full_store, cfg, batches, 10)
    ck = str(tmp_path / "half.latte")
    half_store = build_model(cfg)
    train(half_store, cfg, batches, 5, checkpoint_path=ck)
    store, cfg2, step, opt = load_checkpoint(ck)
    assert step == 5 and cfg2 == cfg
    rest, _ = train(store, cfg2, batches, 5, opt=opt, start_step=step)
    assert full.losses[5:] == rest.losses
    assert all(np.array_equal(full_store[k], store[k]) for k in store)


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    cfg = tiny("macchiato_conv", precision="f32")
    store = build_model(cfg)
    path = str(tmp_path / "m.latte")
    save_checkpoint(path, store, cfg, step=7)
    s2, c2, step, opt = load_checkpoint(path)
    assert step == 7 and c2.digest() == cfg.digest()
    assert all(s2[k].dtype == np.float32 and np.array_equal(s2[k], store[k]) for k in store)
    blob = bytearray(open(path, "rb").read())
    bad = tmp_path / "bad.latte"
    bad.write_bytes(b"NOTLAT" + bytes(blob[6:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(bad))
    blob[10] ^= 0x01  # flip a digest character
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(bad))


def test_learned_positions_refuse_longer_sequences():
    cfg = tiny("attention", positions="learned")
    store = build_model(cfg)
    with pytest.raises(PositionTableExceeded, match="position table exceeded"):
        forward_lm(store, cfg, np.zeros((1, 2 * cfg.seq_len), dtype=int))


def test_lr_schedule():
    cfg = tiny(learning_rate=1.0, warmup_steps=4, total_steps=14)
    assert lr_at(0, cfg) == 0.25
    assert lr_at(3, cfg) == 1.0
    assert lr_at(9, cfg) == pytest.approx(0.5)
    assert lr_at(14, cfg) == 0.0
    assert lr_at(100, cfg.replace(decay_schedule="constant")) == 1.0
    assert lr_at(9, cfg.replace(decay_schedule="cosine")) == pytest.approx(0.5)


def test_adamw_first_step_magnitude():
    # bias-corrected Adam moves every coordinate by ~lr on the first step
    cfg = tiny(weight_decay=0.0)
    store = build_model(cfg)
    before = store.copy()
    ids, t = _data(cfg)
    _, g = loss_and_grads(store, cfg, ids, t)
    from latte.model import adamw_update
    adamw_update(store, g, AdamWState(), 1e-3, cfg)
    moved = np.abs(store["head.W"] - before["head.W"])
    nz = np.abs(g["head.W"]) > 1e-6
    np.testing.assert_allclose(moved[nz], 1e-3, rtol=1e-2)


def test_config_validation():
    with pytest.raises(ValueError, match="unknown mixer"):
        tiny("transformer")
    with pytest.raises(ValueError):
        tiny(n_heads=3)
    with pytest.raises(ValueError):
        tiny(positions="alibi")


def test_latent_usage_shapes():
    for kind in LATTE_FAMILY:
        cfg = tiny(kind)
        layers = latent_usage(build_model(cfg), cfg, _data(cfg)[0])
        extra = 1 if kind.startswith("macchiato") else 0
        assert [u.shape for u in layers] == [(2, 2, 8, 2 + extra)] * 2
        np.testing.assert_allclose(layers[0].sum(-1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        latent_usage(build_model(tiny("attention")), tiny("attention"), _data(tiny())[0])


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(str(path), [{"step": 1, "loss": 2.5, "lr": 0.1, "task_metric": None, "wallclock_ms": 3}],
                      "abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_digest=abc"
    assert lines[1] == "step,loss,lr,task_metric,wallclock_ms"
    assert lines[2] == "1,2.5,0.1,,3"


def test_f32_training_stays_f32():
    cfg = tiny("macchiato_rglru", precision="f32")
    store = build_model(cfg)
    ids, t = _data(cfg)
    _, grads = loss_and_grads(store, cfg, ids, t)
    assert all(g.dtype == np.float32 for g in grads.values())


def test_relative_error_helper():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0
