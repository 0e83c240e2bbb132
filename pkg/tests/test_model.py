from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceinfuse.model import (
    CE,
    DE,
    LAYER_PARTS,
    ConfigError,
    ModelConfig,
    ce_score,
    ce_score_batch,
    cosine,
    embed_sentence_ce,
    embed_sentence_de,
    embed_texts,
    forward,
    init_random,
    layer_key,
    pool_mean,
)
from ceinfuse.tokenizer import SPECIALS, Vocab, encode_pair, encode_single

from conftest import WORDS


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            ModelConfig(hidden=10, heads=4)

    def test_at_least_one_layer(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_layers=0)

    def test_dict_round_trip(self, tiny_config):
        d = {k: str(v) for k, v in tiny_config.to_dict().items()}
        assert ModelConfig.from_dict(d) == tiny_config


class TestInit:
    def test_same_seed_identical(self, tiny_config):
        a, b = init_random(tiny_config, 7, CE), init_random(tiny_config, 7, CE)
        for k in a.tensors:
            np.testing.assert_array_equal(a[k], b[k])

    def test_different_seeds_differ(self, tiny_config):
        a, b = init_random(tiny_config, 7), init_random(tiny_config, 8)
        assert np.max(np.abs(a["embeddings.word"] - b["embeddings.word"])) > 0

    def test_truncated_normal_statistics(self):
        w = init_random(ModelConfig(num_layers=1, hidden=64, heads=4, vocab_size=2000), 0)["embeddings.word"]
        assert w.size >= 1e5
        assert 0.015 <= w.std() <= 0.025
        assert np.abs(w).max() <= 0.04 + 1e-7

    def test_biases_and_norms(self, de_weights):
        assert np.all(de_weights["layers.0.attn.q.b"] == 0)
        assert np.all(de_weights["layers.1.ffn.ln.gamma"] == 1)
        assert np.all(de_weights["embeddings.ln.beta"] == 0)

    def test_head_only_for_ce(self, de_weights, ce_weights):
        assert not de_weights.has_head and ce_weights.has_head


class TestForward:
    def test_capture_matches_final(self, de_weights, vocab):
        enc = encode_single("the cat sat", vocab, 10)
        full, last = forward(de_weights, enc), forward(de_weights, enc, capture=False)
        assert len(full) == 3 and len(last) == 1
        np.testing.assert_array_equal(full[-1], last[0])

    def test_rejects_bad_ids(self, de_weights, vocab):
        enc = encode_single("cat", vocab, 6)
        bad = type(enc)(enc.ids + 100, enc.segment_ids, enc.attention_mask, enc.special_mask, enc.pool_mask)
        with pytest.raises(ValueError):
            forward(de_weights, bad)

    def test_rejects_too_long(self, de_weights, vocab):
        with pytest.raises(ValueError):
            forward(de_weights, encode_single("cat", vocab, 40))

    def test_zeroed_later_layers_leave_prefix(self, de_weights, vocab):
        enc = encode_single("the cat sat on mat", vocab, 10)
        ref = forward(de_weights, enc)
        z = de_weights.copy()
        for part in LAYER_PARTS:
            z.tensors[layer_key(1, part)][...] = 0
        got = forward(z, enc)
        np.testing.assert_array_equal(got[0], ref[0])
        np.testing.assert_array_equal(got[1], ref[1])

    def test_layer0_depends_only_on_embeddings(self, ce_weights, vocab):
        z = ce_weights.copy()
        for i in range(z.config.num_layers):
            for part in LAYER_PARTS:
                z.tensors[layer_key(i, part)][...] = 0
        np.testing.assert_array_equal(
            embed_sentence_ce(z, vocab, "red dog", 0, 16), embed_sentence_ce(ce_weights, vocab, "red dog", 0, 16)
        )

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.sampled_from(WORDS[:12]), min_size=1, max_size=6), st.integers(8, 14), st.integers(15, 32))
    def test_padding_invariance(self, words, short, long):
        v = Vocab([*SPECIALS, *WORDS])
        w = init_random(ModelConfig(num_layers=2, hidden=8, heads=2, ff=16, vocab_size=len(v), max_positions=32), 3)
        text = " ".join(words)
        for layer in range(3):
            a = embed_sentence_de(w, v, text, layer, short)
            b = embed_sentence_de(w, v, text, layer, long)
            np.testing.assert_allclose(a, b, atol=1e-5)

    def test_finite_outputs(self, de_weights, vocab):
        for h in forward(de_weights, encode_pair("the cat", "a dog", vocab, 12)):
            assert np.all(np.isfinite(h))


class TestPooling:
    def test_single_token(self, rng):
        h = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(pool_mean(h, np.array([0, 1, 0])), h[1])

    def test_identical_rows(self, rng):
        row = rng.standard_normal(4)
        np.testing.assert_allclose(pool_mean(np.stack([row, row, row]), np.array([1, 1, 0])), row)

    def test_cls_x_sep(self, vocab, rng):
        enc = encode_single("cat", vocab, 5)
        h = rng.standard_normal((5, 4))
        np.testing.assert_allclose(pool_mean(h, enc), (h[0] + h[1]) / 2)

    def test_no_eligible_positions(self):
        with pytest.raises(ValueError):
            pool_mean(np.ones((2, 3)), np.zeros(2, dtype=np.int64))

    def test_pool_mask_excludes_sep_and_pad(self, vocab):
        enc = encode_pair("cat", "dog", vocab, 9)
        expect = (enc.attention_mask == 1) & (enc.ids != vocab.sep_id)
        np.testing.assert_array_equal(enc.pool_mask.astype(bool), expect)


class TestEmbeddings:
    def test_de_last_layer_equals_capture_off(self, de_weights, vocab):
        enc = encode_single("red cat", vocab, 64 if de_weights.config.max_positions >= 64 else 32)
        want = pool_mean(forward(de_weights, enc, capture=False)[0], enc)
        np.testing.assert_allclose(embed_sentence_de(de_weights, vocab, "red cat", max_len=len(enc)), want, atol=1e-6)

    def test_deterministic(self, de_weights, vocab):
        a = embed_sentence_de(de_weights, vocab, "red cat", 2, 16)
        np.testing.assert_array_equal(a, embed_sentence_de(de_weights, vocab, "red cat", 2, 16))

    def test_de_differs_from_ce(self, de_weights, vocab):
        a = embed_sentence_de(de_weights, vocab, "red cat sat", 2, 16)
        b = embed_sentence_ce(de_weights, vocab, "red cat sat", 2, 16)
        assert np.max(np.abs(a - b)) > 1e-4

    def test_ce_self_cosine(self, ce_weights, vocab):
        e = embed_sentence_ce(ce_weights, vocab, "blue dog", 1, 16)
        assert cosine(e, e) == pytest.approx(1.0, abs=1e-6)

    def test_ce_empty_text_pools_cls(self, ce_weights, vocab):
        # [CLS] is pooled, so an empty self-pair still has one eligible row
        enc = encode_pair("", None, vocab, 8, self_pair=True)
        assert enc.pool_mask.sum() == 1
        assert np.all(np.isfinite(embed_sentence_ce(ce_weights, vocab, "", 0, 8)))

    def test_ce_empty_text_without_cls(self, vocab):
        enc = encode_pair("", None, vocab, 8, self_pair=True, include_cls=False)
        with pytest.raises(ValueError):
            pool_mean(np.ones((8, 4)), enc)

    def test_layer_out_of_range(self, de_weights, vocab):
        with pytest.raises(IndexError):
            embed_sentence_de(de_weights, vocab, "cat", 3, 16)

    def test_batched_matches_single(self, de_weights, vocab):
        texts = ["the cat", "red dog ran far away", "mat", "blue green"]
        out = embed_texts(de_weights, vocab, texts, layers=[0, 2], max_len=16, batch_size=3)
        for j, layer in enumerate([0, 2]):
            for i, t in enumerate(texts):
                np.testing.assert_allclose(out[j, i], embed_sentence_de(de_weights, vocab, t, layer, 16), atol=1e-5)


class TestCeScore:
    def test_zero_head(self, ce_weights, vocab):
        w = ce_weights.copy()
        for k in ("head.pooler.w", "head.pooler.b", "head.classifier.w"):
            w.tensors[k][...] = 0
        w.tensors["head.classifier.b"][...] = 0.37
        assert ce_score(w, vocab, "cat", "dog", 16) == pytest.approx(0.37, abs=1e-7)

    def test_deterministic(self, ce_weights, vocab):
        assert ce_score(ce_weights, vocab, "cat", "dog", 16) == ce_score(ce_weights, vocab, "cat", "dog", 16)

    def test_missing_head(self, de_weights, vocab):
        with pytest.raises(ConfigError):
            ce_score_batch(de_weights, vocab, [("a", "b")], 16)

    def test_batch_matches_single(self, ce_weights, vocab):
        pairs = [("the cat", "sat on mat"), ("dog", "red blue green dog"), ("far", "away")]
        got = ce_score_batch(ce_weights, vocab, pairs, 16, batch_size=2)
        for (q, d), g in zip(pairs, got):
            assert g == pytest.approx(ce_score(ce_weights, vocab, q, d, 16), abs=1e-5)
