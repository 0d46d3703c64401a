"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; the conftest hook prints one
PASS/FAIL line per criterion in the terminal summary.
"""

import time

import mpmath
import numpy as np
import pytest

import oracles
from atinuke import checkpoint
from atinuke import tensor as K
from atinuke.attention import AttentionConfig, AttentionParams, attention_forward
from atinuke.positional import build_table
from atinuke.tensor import Prng, Tensor
from atinuke.training import gradcheck, train_copy
from atinuke.transformer import ModelConfig, init_params, model_forward

REFERENCE = dict(vocab_size=10, model_dim=18, key_dim=50, hidden_dim=100, head_count=2, layer_count=3, dropout_rate=0.1)

mpmath.mp.dps = 30


def reference_model(seed=0):
    cfg = ModelConfig(**REFERENCE, seed=seed)
    return init_params(cfg, Prng(seed)), cfg


def perturbed(params, seed, scale=0.3):
    r = np.random.default_rng(seed)
    return params.with_named({n: Tensor(t.data + r.normal(0, scale, t.shape)) for n, t in params.named().items()})


@pytest.mark.criterion("1", "25x100 batch through the reference config gives 25x100x10 logits in < 5 s")
def test_reference_shape():
    start = time.perf_counter()
    params, cfg = reference_model()
    tokens = np.random.default_rng(0).integers(0, 10, (25, 100))
    logits = model_forward(tokens, params, cfg)
    elapsed = time.perf_counter() - start
    assert logits.shape == (25, 100, 10)
    assert elapsed < 5.0, f"{elapsed:.2f} s"


@pytest.mark.criterion("2", "positional table: row 0 alternates, trig spot values within 1e-12, 512 distinct rows")
def test_positional_table():
    for d in (2, 4, 16, 18):
        assert build_table(d, 4).row(0).tolist() == [0.0, 1.0] * (d // 2)
    row1 = build_table(4, 4).row(1)
    row2 = build_table(4, 4).row(2)
    assert abs(row1[0] - float(mpmath.sin(1))) <= 1e-12
    assert abs(row1[1] - float(mpmath.cos(1))) <= 1e-12
    assert abs(row2[2] - float(mpmath.sin(mpmath.mpf(2) / 100))) <= 1e-12
    t = build_table(16, 512).table.data
    assert len({r.tobytes() for r in t}) == 512
    # pairwise distinct by a margin, not only by rounding noise
    gaps = np.abs(t[:, None, :] - t[None, :, :]).max(-1) + np.eye(512)
    assert gaps.min() > 1e-6


@pytest.mark.criterion("3", "attention matches the per-head loop oracle within 1e-10 on 50 instances in < 10 s")
def test_attention_oracle():
    start = time.perf_counter()
    r = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        heads = int(r.choice([1, 2, 4]))
        dim = heads * int(r.integers(1, 8 // heads + 1))
        batch, seq = int(r.integers(1, 3)), int(r.integers(1, 6))
        causal = bool(r.integers(0, 2))
        ws = [r.normal(0, 0.7, (dim, dim)) for _ in range(4)]
        x = r.normal(size=(batch, seq, dim))
        cfg = AttentionConfig(heads, dim, causal)
        got = attention_forward(x, AttentionParams(*map(Tensor, ws)), cfg).data
        want = np.array(oracles.attention(x.tolist(), *(w.tolist() for w in ws), heads, causal, "full_dim"))
        worst = max(worst, np.abs(got - want).max())
    elapsed = time.perf_counter() - start
    assert worst <= 1e-10
    assert elapsed < 10.0, f"{elapsed:.2f} s"


@pytest.mark.criterion("4", "causal: changing tokens after t leaves logits up to t bitwise unchanged (20 trials)")
def test_causal_independence():
    r = np.random.default_rng(4)
    cfg = ModelConfig(vocab_size=11, model_dim=8, key_dim=8, hidden_dim=16, head_count=2, layer_count=2,
                      causal=True, max_len=32)
    for trial in range(20):
        params = perturbed(init_params(cfg, Prng(trial)), trial)
        seq = int(r.integers(2, 10))
        tokens = r.integers(0, 11, (2, seq))
        t = int(r.integers(0, seq - 1))
        other = tokens.copy()
        other[:, t + 1:] = r.integers(0, 11, (2, seq - t - 1))
        a = model_forward(tokens, params, cfg).data
        b = model_forward(other, params, cfg).data
        assert a[:, : t + 1].tobytes() == b[:, : t + 1].tobytes()


@pytest.mark.criterion("5", "no positional table, non-causal: permuted inputs give permuted outputs within 1e-9 (20 trials)")
def test_permutation_equivariance():
    r = np.random.default_rng(5)
    cfg = ModelConfig(vocab_size=9, model_dim=8, key_dim=8, hidden_dim=16, head_count=2, layer_count=2, max_len=32)
    for trial in range(20):
        params = perturbed(init_params(cfg, Prng(100 + trial)), trial)
        seq = int(r.integers(2, 10))
        tokens = r.integers(0, 9, (2, seq))
        perm = r.permutation(seq)
        out = model_forward(tokens, params, cfg, positional=False).data
        moved = model_forward(tokens[:, perm], params, cfg, positional=False).data
        np.testing.assert_allclose(moved, out[:, perm], rtol=0, atol=1e-9)


@pytest.mark.criterion("6", "analytic gradients match central differences within 1e-4 on >= 200 coordinates in < 60 s")
def test_gradient_verification():
    start = time.perf_counter()
    result = gradcheck(seed=0)
    elapsed = time.perf_counter() - start
    assert result.coordinates >= 200
    assert result.max_error <= 1e-4, result.failures(1e-4)
    assert elapsed < 60.0, f"{elapsed:.2f} s"


@pytest.mark.criterion("7", "1000 random slices: softmax rows sum to 1 within 1e-12, layer-norm means within 1e-9 of 0")
def test_kernel_invariants():
    r = np.random.default_rng(7)
    for _ in range(1000):
        n = int(r.integers(1, 65))
        scale = 10.0 ** r.uniform(-2, 2)
        x = Tensor(r.normal(0, scale, n))
        assert abs(K.softmax_lastdim(x).data.sum() - 1.0) <= 1e-12
        # a uniform gain keeps the mean at zero; per-column gains would not
        gain = r.uniform(0.1, 3.0)
        assert abs(K.layer_norm(x, Tensor(np.full(n, gain)), Tensor.zeros(n)).data.mean()) <= 1e-9


@pytest.mark.criterion("8a", "reference model: save, load, save is byte-identical; walked parameter count 15,628")
def test_checkpoint_round_trip(tmp_path):
    params, cfg = reference_model(seed=8)
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save(params, cfg, first)
    loaded, cfg2 = checkpoint.load(first)
    checkpoint.save(loaded, cfg2, second)
    assert first.read_bytes() == second.read_bytes()
    walked = oracles.count_by_shape_walk(t.shape for t in loaded.named().values())
    assert walked == loaded.count() == 15628


@pytest.mark.criterion("8b", "reference model parameter count equals the quoted 13,276")
def test_stated_parameter_count():
    # 13,276 is the quoted target. The shape walk and the closed form both give
    # 15,628 for this architecture, so this check fails by design.
    params, _ = reference_model()
    walked = oracles.count_by_shape_walk(t.shape for t in params.named().values())
    assert walked == 13276


@pytest.mark.criterion("9", "copy task, vocab 16, causal: held-out loss < 0.1 within 2000 steps at seed 7 in < 60 s")
def test_copy_task_learns():
    start = time.perf_counter()
    result = train_copy(2000, seed=7)
    elapsed = time.perf_counter() - start
    assert result.config.vocab_size == 16 and result.config.causal
    assert result.heldout_loss < 0.1, result.heldout_loss
    assert elapsed < 60.0, f"{elapsed:.2f} s"


@pytest.mark.criterion("10", "zeroed w_out and ff_w2 everywhere: output equals final linear of embedding plus positions, exactly")
def test_residual_passthrough():
    # biases stay at their zero init, so only the two matrices need zeroing
    params, cfg = reference_model(seed=10)
    zeroed = {n: Tensor.zeros(*t.shape) for n, t in params.named().items()
              if n.endswith(("attention.w_out", "ff_w2"))}
    assert len(zeroed) == 2 * cfg.layer_count
    params = params.with_named(zeroed)
    tokens = np.random.default_rng(10).integers(0, 10, (3, 12))
    got = model_forward(tokens, params, cfg, mode="eval").data
    pe = build_table(cfg.model_dim, cfg.max_len).table.data[:12]
    x = params.embedding.data[tokens] + pe
    want = x @ params.final_w.data + params.final_b.data
    assert got.tobytes() == want.tobytes()
