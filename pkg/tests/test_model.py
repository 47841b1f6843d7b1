import math
from dataclasses import replace

import numpy as np
import pytest
from _util import BASE, DECODE_VARIANTS, max_rel, model

from kvlab import tensor as T
from kvlab.attention import AttnConfig, AttnConfigError
from kvlab.cache import KVCache
from kvlab.model import (CheckpointError, ModelConfig, ToyModel, balance_ffn, block_forward,
                         load_checkpoint, param_count, save_checkpoint)
from kvlab.train import (TrainSpec, TrainState, clip_grads, copy_corpus, eval_ppl, lr_at, markov_corpus,
                         train, train_step)

DESK = AttnConfig(d_model=128, n_heads=4, head_dim=32, n_layers=8)
DESK_CLLA = replace(DESK, variant="clla_share_latent", latent_dim=64, rope_dim=16, sharing_factor=2)


# --- blocks ----------------------------------------------------------------------------

def test_zero_weights_make_blocks_identity(rng):
    m = model(DECODE_VARIANTS["clla_share_latent"])
    for b in m.blocks:
        for name in ("w1", "w2", "w3"):
            getattr(b, name).data[...] = 0
        b.attn.wo.data[...] = 0
    h = T.Tensor(rng.normal(size=(1, 4, 16)))
    cache = m.new_cache()
    out = h
    for layer in range(4):
        out = block_forward(out, layer, m.blocks, cache)
    assert np.array_equal(out.data, h.data)


def test_block_composition_by_hand(rng):
    cfg = replace(BASE, n_layers=1, rope=False)
    m = model(cfg)
    b = m.blocks[0]
    h = rng.normal(size=(1, 1, 16)).astype(np.float32)

    def rms(x, g):
        return x / np.sqrt((x * x).mean(-1, keepdims=True) + 1e-6) * g

    x = rms(h, b.attn_norm.data)
    h1 = h + x @ b.attn.wv.data @ b.attn.wo.data  # one token attends only to itself
    x2 = rms(h1, b.ffn_norm.data)
    a = x2 @ b.w1.data
    expect = h1 + ((a / (1 + np.exp(-a))) * (x2 @ b.w3.data)) @ b.w2.data
    out = block_forward(T.Tensor(h), 0, m.blocks, KVCache(cfg))
    np.testing.assert_allclose(out.data, expect, rtol=1e-5, atol=1e-6)


def test_clla_wiring_follows_layer_source():
    m = model(DECODE_VARIANTS["clla_share_kvproj"])
    assert [m.cfg.attn.source(i) for i in range(4)] == [0, 0, 2, 2]
    assert m.blocks[1].attn.wk is m.blocks[0].attn.wk
    assert m.blocks[3].attn.wk is m.blocks[2].attn.wk
    assert m.blocks[2].attn.wk is not m.blocks[0].attn.wk
    assert m.blocks[1].attn.wc is None


# --- parameter accounting ------------------------------------------------------------------

@pytest.mark.parametrize("name", list(DECODE_VARIANTS) + ["desk_mha", "desk_clla", "tied"])
def test_param_count_matches_allocation(name):
    if name == "desk_mha":
        cfg = ModelConfig(DESK)
    elif name == "desk_clla":
        cfg = ModelConfig(DESK_CLLA)
    elif name == "tied":
        cfg = ModelConfig(DECODE_VARIANTS["gqa"], ffn_hidden=20, vocab_size=40, tie_embeddings=True)
    else:
        cfg = ModelConfig(DECODE_VARIANTS[name], ffn_hidden=24, vocab_size=32)
    assert param_count(cfg) == ToyModel(cfg).n_params()


def test_ffn_delta():
    a = ModelConfig(DESK, ffn_hidden=300)
    assert param_count(replace(a, ffn_hidden=317)) - param_count(a) == 3 * 128 * 17 * 8
    one = ModelConfig(replace(DESK, n_layers=1), ffn_hidden=300)
    assert param_count(replace(one, ffn_hidden=317)) - param_count(one) == 3 * 128 * 17


def test_balance_gives_clla_a_wider_ffn():
    mha = ModelConfig(DESK)
    clla = balance_ffn(ModelConfig(DESK_CLLA), param_count(mha))
    assert clla.ffn_hidden > mha.ffn_hidden
    assert abs(param_count(clla) - param_count(mha)) <= 3 * 128 * 8 // 2


def test_balance_fixed_point():
    mha = ModelConfig(DESK)
    assert balance_ffn(mha, param_count(mha)) == mha


def test_balance_below_floor():
    with pytest.raises(AttnConfigError):
        balance_ffn(ModelConfig(DESK), 1000)


# --- training ------------------------------------------------------------------------------

SMALL = ModelConfig(DECODE_VARIANTS["clla_quant"], ffn_hidden=24, vocab_size=32)


def test_lr_schedule():
    spec = TrainSpec(steps=100, warmup=10, peak_lr=1e-2)
    lrs = [lr_at(s, spec) for s in range(100)]
    assert lrs[9] == pytest.approx(1e-2)
    assert all(a <= b for a, b in zip(lrs[:10], lrs[1:10]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lr_at(100, spec) == pytest.approx(1e-3)


def test_clip_contract(rng):
    grads = {"a": rng.normal(size=(10, 10)) * 100, "b": rng.normal(size=5) * 100}
    pre, post = clip_grads(grads, 1.0)
    assert pre > 1.0 and post <= 1.0 + 1e-9
    assert math.sqrt(sum((g ** 2).sum() for g in grads.values())) <= 1.0 + 1e-9


def test_repeated_token_loss_falls():
    state = TrainState.create(SMALL, TrainSpec(steps=40, warmup=2, peak_lr=1e-2))
    batch = np.full((4, 9), 5)
    losses = [train_step(state, batch)[1] for _ in range(40)]
    assert losses[-1] < 0.1 * losses[0]


def test_training_is_deterministic():
    corpus = markov_corpus(4000, 32, seed=1, alphabet=12)
    spec = TrainSpec(steps=15, batch=4, seq_len=16, warmup=3)
    a = [r["loss"] for r in train(SMALL, corpus, spec).log]
    b = [r["loss"] for r in train(SMALL, corpus, spec).log]
    assert a == b


def test_short_run_beats_uniform():
    corpus = markov_corpus(6000, 32, seed=2, alphabet=12)
    state = train(SMALL, corpus, TrainSpec(steps=60, batch=8, seq_len=16, warmup=5, peak_lr=1e-2))
    assert state.log[-1]["loss"] < math.log(32) - 0.3


def test_moments_shaped_like_weights():
    state = TrainState.create(SMALL, TrainSpec())
    for name, p in state.model.named_params().items():
        assert state.m[name].shape == p.shape == state.v[name].shape


def test_non_finite_loss_is_a_training_error():
    from kvlab.train import TrainingError
    state = TrainState.create(SMALL, TrainSpec())
    state.model.lm_head.data[...] = np.float32(3e38)
    with pytest.raises(TrainingError):
        with np.errstate(all="ignore"):
            train_step(state, np.zeros((2, 5), dtype=np.int64))


# --- evaluation ----------------------------------------------------------------------------

def test_uniform_model_ppl_is_vocab():
    m = ToyModel(SMALL)
    m.lm_head.data[...] = 0
    assert eval_ppl(m, copy_corpus(600, 32, 0), seq_len=16) == pytest.approx(32, rel=1e-4)


def test_memorized_sequence_ppl_near_one():
    corpus = np.tile(np.arange(8), 40)
    state = train(SMALL, corpus, TrainSpec(steps=120, batch=4, seq_len=16, warmup=5, peak_lr=1e-2))
    assert eval_ppl(state.model, corpus, seq_len=16) < 1.1


def test_collapsed_variants_train_identically():
    corpus = markov_corpus(3000, 32, seed=3, alphabet=10)
    spec = TrainSpec(steps=10, batch=4, seq_len=16, warmup=2)
    mla = ModelConfig(DECODE_VARIANTS["mla"], ffn_hidden=24, vocab_size=32)
    clla1 = replace(mla, attn=replace(mla.attn, variant="clla_share_latent"))
    a, b = train(mla, corpus, spec), train(clla1, corpus, spec)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    assert eval_ppl(a.model, corpus, 16, 8) == eval_ppl(b.model, corpus, 16, 8)


# --- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = ToyModel(SMALL)
    m.embed.data += 0.5
    save_checkpoint(m, tmp_path / "m.kvlm")
    back = load_checkpoint(tmp_path / "m.kvlm")
    ids = np.arange(10)[None, :] % 32
    assert np.array_equal(back.forward(ids).data, m.forward(ids).data)
    assert back.blocks[1].attn.wk is not None


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "m.kvlm"
    save_checkpoint(ToyModel(SMALL), p)
    data = p.read_bytes()
    for blob in (data[:-3], data + b"x", b"NOPE" + data[4:]):
        p.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


def test_tied_embeddings_forward():
    cfg = ModelConfig(DECODE_VARIANTS["mha"], ffn_hidden=24, vocab_size=32, tie_embeddings=True)
    m = ToyModel(cfg)
    ids = np.arange(6)[None, :]
    assert m.forward(ids).shape == (1, 6, 32)
    assert max_rel(m.forward(ids).data, m.forward(ids).data) == 0.0
