import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cacheblend import (ConfigurationError, DomainError, KVCache, MacCounter, ModelConfig, Role,
                        TokenSequence, decode_step, full_prefill, init_weights, prefill_logits)
from cacheblend.model import layer_macs, prefill_macs
from oracles import reference_prefill


def test_weight_shapes():
    w = init_weights(ModelConfig(num_layers=2, num_heads=2, head_dim=4, seed=7))
    assert w.wq.shape == (2, 8, 8)
    assert w.wq[0].shape == (8, 8)
    assert w.embed.shape == (64, 8)
    assert w.w_in.shape == (2, 8, 32) and w.w_out.shape == (2, 32, 8)


def test_weights_deterministic():
    cfg = ModelConfig(num_layers=2, num_heads=2, head_dim=4, seed=7)
    a, b = init_weights(cfg), init_weights(cfg)
    for name in ("embed", "wq", "wk", "wv", "wo", "w_in", "w_out", "unembed"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = init_weights(ModelConfig(num_layers=2, num_heads=2, head_dim=4, seed=8))
    assert c.wq.tobytes() != a.wq.tobytes()


def test_weight_distribution_bounds():
    cfg = ModelConfig(num_layers=3, num_heads=4, head_dim=8, mlp_dim=64, seed=1)
    w = init_weights(cfg)
    assert np.abs(w.wq).max() <= 0.5 / np.sqrt(32)
    assert np.abs(w.w_out).max() <= 0.5 / np.sqrt(64)
    assert np.abs(w.embed).max() <= 0.5
    assert w.wq.dtype == np.float32


@pytest.mark.parametrize("kw,field", [({"head_dim": 3}, "head_dim"), ({"num_layers": 0}, "num_layers"),
                                      ({"vocab_size": 0}, "vocab_size"), ({"hidden_dim": 7}, "hidden_dim")])
def test_invalid_config(kw, field):
    with pytest.raises(ConfigurationError, match=field):
        ModelConfig(**kw)


def test_config_round_trip_and_digest():
    cfg = ModelConfig(num_layers=3, seed=9)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == ModelConfig(num_layers=3, seed=9).digest()
    assert cfg.digest() != ModelConfig(num_layers=3, seed=10).digest()
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_single_token_attention_is_one(tiny):
    _, att = full_prefill(tiny, [5], 1)
    for a in att:
        assert a.rows.shape == (2, 1, 1)
        assert np.all(a.rows == 1.0)


def test_shapes(tiny):
    cache, att = full_prefill(tiny, [1, 2, 3, 4, 5, 6], 2)
    assert cache.role is Role.FULL
    assert cache.k.shape == cache.v.shape == (2, 6, 8)
    assert list(cache.positions) == list(range(6))
    assert len(att) == 2 and att[1].rows.shape == (2, 2, 6) and att[1].layer == 1


def test_matches_reference_implementation(tiny):
    tokens = [3, 1, 4, 1, 5]
    cache, att = full_prefill(tiny, tokens, 2)
    ks, vs, ps = reference_prefill(tiny, tokens)
    for l in range(2):
        np.testing.assert_allclose(cache.k[l], ks[l], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(cache.v[l], vs[l], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(att[l].rows, np.array(ps[l])[:, 3:, :], rtol=1e-5, atol=1e-6)


def test_matches_reference_at_offset_positions(tiny):
    seq = TokenSequence([3, 1, 4, 1], [10, 11, 15, 40])
    cache, att = full_prefill(tiny, seq, 4)
    ks, _, ps = reference_prefill(tiny, [3, 1, 4, 1], [10, 11, 15, 40])
    np.testing.assert_allclose(cache.k[1], ks[1], rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(att[1].rows, ps[1], rtol=1e-5, atol=1e-6)


def test_empty_input_rejected(tiny):
    with pytest.raises(DomainError):
        full_prefill(tiny, [], 1)


@pytest.mark.parametrize("s", [0, 4])
def test_bad_suffix_len(tiny, s):
    with pytest.raises(DomainError):
        full_prefill(tiny, [1, 2, 3], s)


def test_out_of_vocab(tiny):
    with pytest.raises(DomainError):
        full_prefill(tiny, [1, 99], 1)


def test_token_sequence_validation():
    with pytest.raises(DomainError):
        TokenSequence([1, 2], [0])
    with pytest.raises(DomainError):
        TokenSequence([1, 2], [3, 3])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=2, max_size=12), st.data())
def test_causality(tiny, tokens, data):
    t = data.draw(st.integers(0, len(tokens) - 1))
    other = data.draw(st.integers(0, 15).filter(lambda x: x != tokens[t]))
    a, _ = full_prefill(tiny, tokens, 1)
    b, _ = full_prefill(tiny, tokens[:t] + [other] + tokens[t + 1:], 1)
    assert np.array_equal(a.k[:, :t], b.k[:, :t]) and np.array_equal(a.v[:, :t], b.v[:, :t])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=10), st.lists(st.integers(0, 15), min_size=1, max_size=6))
def test_prefix_stability(tiny, prefix, suffix):
    whole, _ = full_prefill(tiny, prefix + suffix, 1)
    part, _ = full_prefill(tiny, prefix, 1)
    n = len(prefix)
    np.testing.assert_allclose(whole.k[:, :n], part.k, atol=1e-6)
    np.testing.assert_allclose(whole.v[:, :n], part.v, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=12), st.integers(1, 12))
def test_attention_rows_are_distributions(tiny, tokens, s):
    s = min(s, len(tokens))
    _, att = full_prefill(tiny, tokens, s)
    T = len(tokens)
    for a in att:
        assert np.all(a.rows >= 0)
        np.testing.assert_allclose(a.rows.sum(-1), 1.0, atol=1e-5)
        for r in range(s):
            own = T - s + r
            assert np.all(a.rows[:, r, own + 1:] == 0)


def test_bitwise_determinism(small):
    toks = list(range(20))
    a, aa = full_prefill(small, toks, 3)
    b, bb = full_prefill(small, toks, 3)
    assert a.k.tobytes() == b.k.tobytes() and a.v.tobytes() == b.v.tobytes()
    assert all(x.rows.tobytes() == y.rows.tobytes() for x, y in zip(aa, bb))


def test_decode_matches_prefill(tiny):
    cache, _ = full_prefill(tiny, [3, 1, 4], 1)
    logits, grown = decode_step(tiny, cache, 9)
    assert logits.shape == (16,)
    np.testing.assert_allclose(logits, prefill_logits(tiny, [3, 1, 4, 9]), rtol=1e-5, atol=1e-6)
    full, _ = full_prefill(tiny, [3, 1, 4, 9], 1)
    np.testing.assert_allclose(grown.k, full.k, atol=1e-6)


def test_decode_appends_one_token(tiny):
    cache, _ = full_prefill(tiny, [3, 1, 4], 1)
    for n in range(4, 7):
        _, cache = decode_step(tiny, cache, 2)
        assert cache.num_tokens == n
        assert cache.chunk_boundaries == [(0, n)]


def test_greedy_decode_deterministic(tiny):
    def run():
        cache, _ = full_prefill(tiny, [3, 1, 4], 1)
        out, tok = [], 5
        for _ in range(5):
            logits, cache = decode_step(tiny, cache, tok)
            tok = int(np.argmax(logits))
            out.append(tok)
        return out

    assert run() == run()


def test_decode_position_overflow():
    w = init_weights(ModelConfig(max_positions=4))
    cache, _ = full_prefill(w, [1, 2, 3, 4], 1)
    with pytest.raises(DomainError):
        decode_step(w, cache, 1)


def test_decode_needs_contiguous_positions(tiny):
    cache, _ = full_prefill(tiny, TokenSequence([1, 2], [0, 5]), 1)
    with pytest.raises(DomainError):
        decode_step(tiny, cache, 3)


def test_mac_counter_matches_formula(small):
    c = MacCounter()
    full_prefill(small, list(range(10)), 1, counter=c)
    assert c.total == prefill_macs(small.config, 10)
    assert sum(c.per_layer.values()) == c.total
    assert c.per_layer[0] == layer_macs(small.config, 10, 10)


def test_cache_validation():
    k = np.zeros((1, 3, 4), np.float32)
    with pytest.raises(DomainError):
        KVCache(Role.FULL, k, k, [0, 1, 1])
    with pytest.raises(DomainError):
        KVCache(Role.FULL, k, k, [0, 1, 2], [(0, 2)])
