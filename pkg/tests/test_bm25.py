from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceinfuse import bm25

FIVE = ["a b c", "a a d", "b e", "c c c d e", "f"]


def hand_score(corpus, query, doc_id, k1=1.2, b=0.75):
    """Direct transcription of the Okapi formula with Lucene idf."""
    docs = [d.split() for d in corpus]
    n = len(docs)
    avgdl = sum(len(d) for d in docs) / n
    total = 0.0
    for t in dict.fromkeys(query.split()):
        df = sum(t in d for d in docs)
        tf = docs[doc_id].count(t)
        if tf == 0:
            continue
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        total += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(docs[doc_id]) / avgdl))
    return total


class TestBuild:
    def test_single_doc_avgdl(self):
        assert bm25.build(["x y z"]).avgdl == 3

    def test_duplicate_docs(self):
        idx = bm25.build(["p q", "p q", "r"])
        assert idx.doc_lengths[0] == idx.doc_lengths[1] == 2

    def test_df(self):
        assert bm25.build(FIVE).df("b") == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            bm25.build([])


class TestScore:
    def test_no_overlap(self):
        assert bm25.score(bm25.build(FIVE), "zzz", 0) == 0.0

    def test_worked_example(self):
        idx = bm25.build(["a b", "a", "c"])
        assert bm25.score(idx, "a", 1) == pytest.approx(0.5235, abs=1e-4)
        assert idx.idf("a") == pytest.approx(math.log(1.6), abs=1e-12)

    @pytest.mark.parametrize("query", ["a", "c d", "a b c d e f", "e e b"])
    def test_five_doc_formula(self, query):
        idx = bm25.build(FIVE)
        for d in range(5):
            assert abs(bm25.score(idx, query, d) - hand_score(FIVE, query, d)) < 1e-9
        np.testing.assert_allclose(bm25.score_all(idx, query), [hand_score(FIVE, query, d) for d in range(5)], rtol=0, atol=1e-9)

    def test_repeated_query_term_deduplicated(self):
        idx = bm25.build(FIVE)
        assert bm25.score(idx, "c c c", 3) == bm25.score(idx, "c", 3)

    def test_unknown_doc(self):
        with pytest.raises(KeyError):
            bm25.score(bm25.build(FIVE), "a", 9)

    def test_tf_monotone(self):
        corpus = ["t " * n + "pad " * (6 - n) for n in range(1, 6)]
        s = bm25.score_all(bm25.build(corpus), "t")
        assert np.all(np.diff(s) > 0)


words = st.sampled_from("a b c d e f g h".split())
corpora = st.lists(st.lists(words, min_size=1, max_size=8).map(" ".join), min_size=1, max_size=15)


class TestTopK:
    def test_full_ranking(self):
        idx = bm25.build(FIVE)
        assert len(bm25.top_k(idx, "a", 10)) == 5

    def test_single_match_first(self):
        assert bm25.top_k(bm25.build(FIVE), "f", 1)[0][0] == 4

    def test_random_corpus_brute_force(self):
        r = np.random.default_rng(0)
        vocab = [f"w{i}" for i in range(60)]
        corpus = [" ".join(r.choice(vocab, r.integers(3, 12))) for _ in range(200)]
        idx = bm25.build(corpus)
        for _ in range(20):
            q = " ".join(r.choice(vocab, 3))
            brute = sorted(((-bm25.score(idx, q, d), d) for d in range(200)))[:10]
            got = bm25.top_k(idx, q, 10)
            assert [d for d, _ in got] == [d for _, d in brute]

    @settings(max_examples=60, deadline=None)
    @given(corpora, st.lists(words, min_size=1, max_size=3).map(" ".join), st.integers(1, 20))
    def test_brute_force_and_nonnegative(self, corpus, q, k):
        idx = bm25.build(corpus)
        scores = [bm25.score(idx, q, d) for d in range(len(corpus))]
        assert min(scores) >= 0
        want = sorted(range(len(corpus)), key=lambda d: (-scores[d], d))[:k]
        assert [d for d, _ in bm25.top_k(idx, q, k)] == want


class TestMining:
    CORPUS = ["red apple pie", "red apple", "apple tart", "red car", "blue sky"]

    def test_positive_excluded(self):
        idx = bm25.build(self.CORPUS)
        ex = bm25.mine_hard_negatives(idx, self.CORPUS, [("red apple", "red apple", [1])], n_neg=2, window=4)
        assert "red apple" not in ex[0].negatives and len(ex[0].negatives) == 2

    def test_only_positives(self, caplog):
        corpus = ["x y", "x"]
        idx = bm25.build(corpus)
        with caplog.at_level(logging.WARNING):
            ex = bm25.mine_hard_negatives(idx, corpus, [("x", "x y", [0, 1])], n_neg=2, window=5)
        assert ex[0].negatives == [] and "negative candidates" in caplog.text

    def test_reproducible(self):
        r = np.random.default_rng(1)
        corpus = [" ".join(r.choice(list("abcdefgh"), 5)) for _ in range(40)]
        idx = bm25.build(corpus)
        triples = [(corpus[i][:3], corpus[i], [i]) for i in range(5)]
        a = bm25.mine_hard_negatives(idx, corpus, triples, n_neg=3, window=10, seed=7)
        b = bm25.mine_hard_negatives(idx, corpus, triples, n_neg=3, window=10, seed=7)
        assert [e.negatives for e in a] == [e.negatives for e in b]

    def test_window_smaller_than_n_neg(self):
        with pytest.raises(ValueError):
            bm25.mine_hard_negatives(bm25.build(self.CORPUS), self.CORPUS, [], n_neg=4, window=2)
