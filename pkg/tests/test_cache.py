from dataclasses import replace

import numpy as np
import pytest
from _util import BASE, DECODE_VARIANTS, layer_stack, model, run_stack
from hypothesis import given
from hypothesis import strategies as st

from kvlab import tensor as T
from kvlab.attention import AttnConfig
from kvlab.cache import (FormatError, KVCache, StateError, cache_append, deserialize_cache, memory_bytes,
                         paper_methods, serialize_cache)
from kvlab.quant import dequantize, quantize

CLLA = DECODE_VARIANTS["clla_share_latent"]
QUANT = DECODE_VARIANTS["clla_quant"]


def _rows(rng, s, width):
    return T.Tensor(rng.normal(size=(1, s, width)))


# --- storage -------------------------------------------------------------------------

def test_consumer_reads_producer_rows(rng):
    cache = KVCache(CLLA)
    c = _rows(rng, 3, 8)
    cache.positions(0, 3)
    cache.positions(1, 3)
    cache_append(cache, 0, "c", c)
    assert cache.read(1, "c").data is not None
    assert np.array_equal(cache.read(1, "c").data, c.data)
    assert (1, "c") not in cache.keys()


def test_append_to_consumer_is_a_state_error(rng):
    cache = KVCache(CLLA)
    with pytest.raises(StateError):
        cache_append(cache, 1, "c", _rows(rng, 1, 8))


def test_rows_kept_in_order(rng):
    cache = KVCache(CLLA)
    chunks = [_rows(rng, n, 8) for n in (2, 1, 3)]
    for ch in chunks:
        cache.positions(0, ch.shape[1])
        cache_append(cache, 0, "c", ch)
    assert np.array_equal(cache.read(0, "c").data, np.concatenate([c.data for c in chunks], axis=1))


def test_read_with_missing_rows_is_a_state_error(rng):
    cache = KVCache(CLLA)
    cache.positions(0, 2)
    cache_append(cache, 0, "c", _rows(rng, 1, 8))
    with pytest.raises(StateError):
        cache.read(0, "c")


def test_quantized_append_reads_dequantized(rng):
    cache = KVCache(QUANT, packed=True)
    c = _rows(rng, 4, 8)
    cache.positions(0, 4)
    cache_append(cache, 0, "c", c)
    assert np.array_equal(cache.read(0, "c").data, dequantize(quantize(c.data, QUANT.quant)))


def test_packed_needs_quant():
    with pytest.raises(Exception):
        KVCache(CLLA, packed=True)


def test_token_counts_must_agree(rng):
    cache = KVCache(CLLA)
    cache.positions(0, 2)
    with pytest.raises(StateError):
        cache.n_tokens


def test_sharing_halves_latent_bytes(rng):
    f1 = replace(CLLA, variant="mla", sharing_factor=1)
    h = rng.normal(size=(1, 6, 16))
    _, c1 = run_stack(f1, layer_stack(f1), h)
    _, c2 = run_stack(CLLA, layer_stack(CLLA), h)

    def split(cache):
        lat = sum(t.data.size for (_, n), ch in cache._dense.items() if n == "c" for t in ch)
        rope = sum(t.data.size for (_, n), ch in cache._dense.items() if n == "k_rope" for t in ch)
        return lat * 2, rope * 2

    (l1, r1), (l2, r2) = split(c1), split(c2)
    assert l2 * 2 == l1 and r2 == r1
    assert c2.allocated_bytes() == l2 + r2


def test_allocated_bytes_match_principled_accounting(rng):
    for name, cfg in DECODE_VARIANTS.items():
        m = model(cfg)
        cache = m.new_cache(packed=cfg.quant is not None)
        m.forward(np.arange(5)[None, :], cache)
        assert cache.allocated_bytes() == memory_bytes(cfg, "principled").bytes_per_token * 5, name


# --- serialization -----------------------------------------------------------------------

def _filled(cfg, seed, tokens=5, packed=False, batch=1):
    m = model(cfg, seed)
    cache = m.new_cache(packed=packed)
    m.forward(np.random.default_rng(seed).integers(0, 32, size=(batch, tokens)), cache)
    return cache


def test_empty_cache_round_trip():
    cache = KVCache(CLLA)
    back = deserialize_cache(serialize_cache(cache))
    assert back == cache and back.keys() == [] and back.steps == [0] * 4


@pytest.mark.parametrize("name", list(DECODE_VARIANTS))
def test_round_trip_every_variant(name):
    cfg = DECODE_VARIANTS[name]
    cache = _filled(cfg, 1, packed=cfg.quant is not None)
    back = deserialize_cache(serialize_cache(cache))
    assert serialize_cache(back) == serialize_cache(cache)
    for key in cache.keys():
        assert np.array_equal(back.read(*key).data, cache.read(*key).data)


def test_deserialized_cache_keeps_decoding():
    m = model(QUANT, 2)
    ids = np.random.default_rng(2).integers(0, 32, size=(1, 6))
    cache = m.new_cache(packed=True)
    m.forward(ids[:, :4], cache)
    restored = deserialize_cache(serialize_cache(cache))
    a = m.forward(ids[:, 4:], cache).data
    b = m.forward(ids[:, 4:], restored).data
    assert np.array_equal(a, b)


@given(st.integers(0, 2**31 - 1))
def test_random_packed_caches_round_trip(seed):
    rng = np.random.default_rng(seed)
    cache = KVCache(QUANT, packed=True)
    for _ in range(int(rng.integers(1, 4))):
        n = int(rng.integers(1, 4))
        for layer in range(4):
            cache.positions(layer, n)
            if layer % 2 == 0:
                cache_append(cache, layer, "c", T.Tensor(rng.normal(size=(2, n, 8)) * rng.uniform(0, 10)))
            cache_append(cache, layer, "k_rope", T.Tensor(rng.normal(size=(2, n, 4))))
    data = serialize_cache(cache)
    back = deserialize_cache(data)
    assert serialize_cache(back) == data


def test_corruption_is_a_format_error():
    data = bytearray(serialize_cache(_filled(QUANT, 3, packed=True)))
    bad_magic = b"XXXX" + bytes(data[4:])
    bad_version = bytes(data[:4]) + b"\x09\x00" + bytes(data[6:])
    bad_digest = bytes(data[:10]) + bytes([data[10] ^ 1]) + bytes(data[11:])
    truncated = bytes(data[:-9])
    trailing = bytes(data) + b"\x00"
    for blob in (bad_magic, bad_version, bad_digest, truncated, trailing):
        with pytest.raises(FormatError):
            deserialize_cache(blob)


def test_corrupted_length_field():
    cache = _filled(CLLA, 4)
    data = serialize_cache(cache)
    # the first payload length is the u64 just before the first payload; find it by re-encoding
    first = cache.keys()[0]
    payload = np.concatenate([t.data for t in cache._dense[first]], axis=1).astype("<f4").tobytes()
    at = data.index(payload) - 8
    forged = data[:at] + (len(payload) + 4).to_bytes(8, "little") + data[at + 8:]
    with pytest.raises(FormatError):
        deserialize_cache(forged)


# --- accounting --------------------------------------------------------------------------

def test_paper_rows():
    got = {n: memory_bytes(c, "paper", n) for n, c in paper_methods()}
    assert [got[n].bytes_per_token_per_layer for n in ("MHA", "GQA", "MLA", "CLLA", "CLLA-quant")] == \
        [6144, 3072, 576, 320, 128]
    assert [got[n].ratio_label for n in ("MHA", "GQA", "MLA", "CLLA", "CLLA-quant")] == \
        ["100%", "50.0%", "9.4%", "5.2%", "2.1%"]


def test_principled_clla_quant_hand_value():
    cfg = dict(paper_methods())["CLLA-quant"]
    rep = memory_bytes(cfg, "principled")
    # per layer: 256 latent dims at half a byte, 8 scales of 2 bytes, then 64 rotary dims at 2 bytes
    assert rep.bytes_per_token_per_layer == 256 * 0.5 + 8 * 2 + 64 * 2 == 272


def test_two_scalar_cache():
    cfg = AttnConfig(d_model=1, n_heads=1, head_dim=1, rope=False)
    assert memory_bytes(cfg).bytes_per_token_per_layer == 4


def test_cla_halves_bytes():
    mha = AttnConfig(d_model=32, n_heads=4, head_dim=8, n_layers=4)
    cla = replace(mha, variant="cla", sharing_factor=2)
    for mode in ("paper", "principled"):
        assert memory_bytes(cla, mode).bytes_per_token * 2 == memory_bytes(mha, mode).bytes_per_token


@pytest.mark.parametrize("mode", ["paper", "principled"])
def test_ordering_both_modes(mode):
    b = [memory_bytes(c, mode).bytes_per_token for _, c in paper_methods()]
    assert b == sorted(b, reverse=True)


@given(st.integers(1, 64), st.integers(1, 4096))
def test_totals_linear(batch, seq):
    for _, cfg in paper_methods():
        r = memory_bytes(cfg)
        assert r.total_bytes(batch, seq) == batch * seq * r.total_bytes(1, 1)
        assert r.total_bytes(batch, 2 * seq) == 2 * r.total_bytes(batch, seq)


def test_unknown_mode():
    with pytest.raises(Exception):
        memory_bytes(BASE, "fuzzy")
