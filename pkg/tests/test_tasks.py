import numpy as np
import pytest

from latte.model import ModelConfig, PositionTableExceeded, build_model
from latte.tasks import (FILLER, MQARConfig, cached_mqar, check_recoverable, detokenize, evaluate_mqar,
                         evaluate_ppl, generate_mqar, length_extrapolation_eval, load_mqar, load_text_corpus,
                         lm_batches, mqar_accuracy, mqar_batches, oracle_predictor, save_mqar, synthetic_text,
                         tokenize_bytes)


def test_single_pair_example():
    cfg = MQARConfig(vocab_size=16, seq_len=8, num_pairs=1, train_examples=50, test_examples=5)
    ds = generate_mqar(cfg)
    for ex in ds:
        assert ex.target_mask.sum() == 1
        t = np.flatnonzero(ex.target_mask)[0]
        assert ex.tokens[t] == ex.tokens[0]
        assert ex.targets[t] == ex.tokens[1]


def test_layout_and_alphabets():
    cfg = MQARConfig(train_examples=500)
    ds = generate_mqar(cfg)
    N, V = cfg.num_pairs, cfg.vocab_size
    keys = ds.tokens[:, 0:2 * N:2]
    vals = ds.tokens[:, 1:2 * N:2]
    assert keys.min() >= 1 and keys.max() < V // 2
    assert vals.min() >= V // 2 and vals.max() < V
    assert all(len(set(row)) == N for row in keys)
    assert np.all(ds.mask.sum(axis=1) == N)
    assert not ds.mask[:, :2 * N].any()
    rest = ds.tokens[:, 2 * N:][~ds.mask[:, 2 * N:]]
    assert np.all(rest == FILLER)
    assert all(check_recoverable(ex) for ex in ds)


def test_key_value_histogram_uniform():
    # 32 per-bin 3-sigma tests would fail by chance about 8% of the time, so the
    # multinomial check is made on the pooled chi-square statistic instead
    cfg = MQARConfig(train_examples=10_000)
    ds = generate_mqar(cfg)
    N = cfg.num_pairs
    for block, lo, n_sym in ((ds.tokens[:, 0:2 * N:2], 1, cfg.n_keys), (ds.tokens[:, 1:2 * N:2], 32, 32)):
        counts = np.bincount(block.reshape(-1) - lo, minlength=n_sym)
        assert len(counts) == n_sym
        expected = counts.sum() / n_sym
        chi2 = ((counts - expected) ** 2 / expected).sum()
        df = n_sym - 1
        assert abs(chi2 - df) <= 3 * np.sqrt(2 * df), chi2


def test_determinism_and_split_independence():
    cfg = MQARConfig(train_examples=100, test_examples=100)
    a, b = generate_mqar(cfg), generate_mqar(cfg)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.targets, b.targets)
    assert not np.array_equal(a.tokens, generate_mqar(cfg, "test").tokens)
    assert not np.array_equal(a.tokens, generate_mqar(MQARConfig(train_examples=100, seed=1)).tokens)


def test_infeasible_packing():
    with pytest.raises(ValueError, match="infeasible"):
        MQARConfig(seq_len=10, num_pairs=4)
    with pytest.raises(ValueError, match="infeasible"):
        MQARConfig(vocab_size=8, seq_len=64, num_pairs=4)


def test_recoverability_detects_bad_targets():
    ds = generate_mqar(MQARConfig(train_examples=3))
    ex = next(iter(ds))
    ex.targets[np.flatnonzero(ex.target_mask)[0]] += 1
    assert not check_recoverable(ex)


def test_oracle_and_chance_accuracy():
    cfg = MQARConfig(test_examples=2500)
    ds = generate_mqar(cfg, "test")
    mc = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=16, n_latents=4, vocab_size=64, seq_len=64,
                     mixer_kind="latte", dropout=0.0)
    assert evaluate_mqar(oracle_predictor(64), mc, ds) == 1.0
    untrained = evaluate_mqar(build_model(mc), mc, ds)
    assert abs(untrained - 1 / 64) <= 0.02
    # label-shuffled predictions land near chance
    rng = np.random.default_rng(0)
    shuffled = lambda ids: np.eye(64)[rng.integers(0, 64, ids.shape)]  # noqa: E731
    assert abs(evaluate_mqar(shuffled, mc, ds) - 1 / 64) <= 0.02


def test_accuracy_only_counts_masked_positions():
    ds = generate_mqar(MQARConfig(train_examples=4))
    logits = np.zeros(ds.tokens.shape + (64,))
    logits[..., 0] = 1.0  # every prediction is the filler id
    assert mqar_accuracy(logits, ds) == 0.0


def test_cache_roundtrip(tmp_path):
    cfg = MQARConfig(train_examples=200, test_examples=20)
    ds = cached_mqar(str(tmp_path), cfg, "train")
    again = cached_mqar(str(tmp_path), cfg, "train")
    assert np.array_equal(ds.tokens, again.tokens) and np.array_equal(ds.mask, again.mask)
    path = str(tmp_path / "x.bin")
    save_mqar(path, ds, cfg)
    with pytest.raises(ValueError):
        load_mqar(path, MQARConfig(train_examples=201))


def test_batches_pure_in_step():
    ds = generate_mqar(MQARConfig(train_examples=100))
    b = mqar_batches(ds, 16)
    for s in (0, 5, 13):
        assert all(np.array_equal(x, y) for x, y in zip(b(s), b(s)))


def test_text_corpus_chunks(tmp_path):
    data = synthetic_text(64)
    path = tmp_path / "c.txt"
    path.write_bytes(data)
    chunks = load_text_corpus(str(path), 32)
    assert chunks.shape == (2, 32)
    assert detokenize(chunks) == data
    assert np.array_equal(load_text_corpus(str(path), 32), chunks)
    (tmp_path / "e.txt").write_bytes(b"")
    with pytest.raises(ValueError, match="empty"):
        load_text_corpus(str(tmp_path / "e.txt"), 8)


def test_synthetic_text_is_deterministic_prose():
    a = synthetic_text(500, seed=3)
    assert a == synthetic_text(500, seed=3) and len(a) == 500
    assert a != synthetic_text(500, seed=4)
    assert tokenize_bytes(a, 10).max() < 128


def test_lm_batches_shift_by_one():
    tok = np.arange(100)
    ids, tgt, mask = lm_batches(tok, 8, 3)(0)
    assert mask is None and ids.shape == (3, 8)
    assert np.array_equal(ids[:, 1:], tgt[:, :-1])


def test_length_extrapolation_contracts():
    tok = tokenize_bytes(synthetic_text(3000), 1).reshape(-1)
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=16, n_latents=4, window=8, vocab_size=256,
                      seq_len=32, mixer_kind="macchiato_rglru", dropout=0.0, positions="rope")
    store = build_model(cfg)
    rows = length_extrapolation_eval(store, cfg, tok, 32, [32, 128], n_tokens=256)
    assert rows[0][1] == evaluate_ppl(store, cfg, tok, 32, 256)
    assert all(np.isfinite(p) for _, p in rows)
    with pytest.raises(ValueError):
        length_extrapolation_eval(store, cfg, tok, 32, [16])
    att = cfg.replace(mixer_kind="attention", positions="learned")
    with pytest.raises(PositionTableExceeded, match="position table exceeded"):
        length_extrapolation_eval(build_model(att), att, tok, 32, [64], n_tokens=256)
