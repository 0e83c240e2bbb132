from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceinfuse.evaluation import hits_at_k
from ceinfuse.model import embed_texts
from ceinfuse.retrieval import (
    RERANKED,
    RETRIEVED,
    EmbeddingError,
    EmbeddingIndex,
    SearchResult,
    build_index,
    ce_scorer,
    normalize_rows,
    read_results_tsv,
    rerank,
    retrieve_and_rerank,
    search,
    search_many,
    write_results_tsv,
)


def random_index(rng, n=1000, d=16):
    return EmbeddingIndex([f"d{i}" for i in range(n)], normalize_rows(rng.standard_normal((n, d))))


def brute(index, q, k):
    qn = q / np.linalg.norm(q)
    s = [float(row @ qn) for row in index.matrix]
    return sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]


class TestBuildIndex:
    def test_one_doc_unit_row(self, de_weights, vocab):
        idx = build_index(["a"], ["the cat"], lambda t: embed_texts(de_weights, vocab, t, max_len=16)[0])
        assert idx.matrix.shape == (1, 8)
        assert np.linalg.norm(idx.matrix[0]) == pytest.approx(1.0, abs=1e-6)

    def test_duplicates_identical(self, de_weights, vocab):
        idx = build_index(["a", "b"], ["red dog", "red dog"], lambda t: embed_texts(de_weights, vocab, t, max_len=16)[0])
        np.testing.assert_array_equal(idx.matrix[0], idx.matrix[1])

    def test_zero_vector_names_doc(self):
        with pytest.raises(EmbeddingError, match="'b'"):
            build_index(["a", "b"], ["x", "y"], lambda t: np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_unique_ids(self):
        with pytest.raises(ValueError):
            EmbeddingIndex(["a", "a"], np.eye(2))


class TestSearch:
    def test_self_match_first(self, rng):
        idx = random_index(rng, 50)
        res = search(idx, idx.matrix[7] * 3.0, 5)
        assert res.ids[0] == "d7" and res.hits[0][1] == pytest.approx(1.0, abs=1e-6)
        assert res.stage == RETRIEVED

    def test_k_larger_than_n(self, rng):
        assert len(search(random_index(rng, 5), rng.standard_normal(16), 10)) == 5

    @pytest.mark.parametrize("k", [1, 10, 50])
    def test_brute_force_oracle(self, k):
        r = np.random.default_rng(k)
        idx = random_index(r)
        queries = r.standard_normal((100, 16))
        many = search_many(idx, queries, k)
        for q, res in zip(queries, many):
            want = [f"d{i}" for i in brute(idx, q, k)]
            assert res.ids == want and search(idx, q, k).ids == want

    def test_ties_to_smaller_id(self):
        idx = EmbeddingIndex(["a", "b", "c"], np.array([[1.0, 0], [0, 1.0], [1.0, 0]]))
        assert search(idx, np.array([1.0, 0.0]), 2).ids == ["a", "c"]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 30))
    def test_scores_non_increasing_no_duplicates(self, seed, k):
        r = np.random.default_rng(seed)
        # coarse values force many ties
        m = r.integers(-2, 3, size=(25, 3)).astype(float) + 0.01
        idx = EmbeddingIndex([str(i) for i in range(25)], normalize_rows(m))
        q = r.standard_normal(3)
        res = search(idx, q, k)
        assert [int(i) for i in res.ids] == brute(idx, q, k)
        scores = [s for _, s in res.hits]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        assert len(set(res.ids)) == len(res.ids)


class TestRerank:
    CANDS = SearchResult([("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6)])

    def test_equal_scores_keep_order(self):
        assert rerank(self.CANDS, lambda ids: np.zeros(len(ids)), depth=4).ids == ["a", "b", "c", "d"]

    def test_depth_one_is_identity(self):
        assert rerank(self.CANDS, lambda ids: np.arange(len(ids)), depth=1).ids == self.CANDS.ids

    def test_tail_untouched(self):
        res = rerank(self.CANDS, lambda ids: np.array([1.0, 2.0]), depth=2)
        assert res.ids == ["b", "a", "c", "d"] and res.stage == RERANKED
        assert res.hits[2:] == self.CANDS.hits[2:]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.integers(1, 25))
    def test_permutation_of_head(self, scores, depth):
        cands = SearchResult([(str(i), 1.0 - i / 100) for i in range(len(scores))])
        res = rerank(cands, lambda ids: np.array([scores[int(i)] for i in ids]), depth)
        d = min(depth, len(scores))
        assert sorted(res.ids[:d]) == sorted(cands.ids[:d]) and res.hits[d:] == cands.hits[d:]

    def test_oracle_scorer_never_hurts(self):
        r = np.random.default_rng(0)
        qrels, before, after = {}, {}, {}
        for q in range(50):
            ids = [f"{q}_{i}" for i in range(50)]
            rel = set(r.choice(ids, 2, replace=False))
            qrels[str(q)] = rel
            cands = SearchResult([(d, 1.0 - i / 100) for i, d in enumerate(ids)])
            before[str(q)] = cands
            after[str(q)] = rerank(cands, lambda xs: np.array([x in rel for x in xs], float), 50)
        assert hits_at_k(after, qrels, 10) >= hits_at_k(before, qrels, 10)
        assert hits_at_k(after, qrels, 10) == 1.0

    def test_ce_scorer_needs_head(self, de_weights, vocab):
        with pytest.raises(ValueError):
            ce_scorer(de_weights, vocab, "q", {})


class TestRetrieveAndRerank:
    def test_k1_matches_search(self, rng):
        idx = random_index(rng, 100)
        q = rng.standard_normal(16)
        got = retrieve_and_rerank(q, idx, lambda ids: rng.standard_normal(len(ids)), 1, 1)
        assert got.ids == search(idx, q, 1).ids and got.stage == RERANKED

    def test_bounded_recall(self, rng):
        idx = random_index(rng, 200)
        q = rng.standard_normal(16)
        outside = search(idx, q, 200).ids[-1]
        got = retrieve_and_rerank(q, idx, lambda ids: np.array([d == outside for d in ids], float), 50, 10)
        assert outside not in got.ids

    def test_candidate_set_preserved_at_depth(self, rng):
        idx = random_index(rng, 200)
        q = rng.standard_normal(16)
        got = retrieve_and_rerank(q, idx, lambda ids: rng.standard_normal(len(ids)), 50, 50)
        assert set(got.ids) == set(search(idx, q, 50).ids)

    def test_end_to_end_with_ce(self, ce_weights, vocab):
        texts = {"a": "the cat sat", "b": "red dog ran", "c": "blue green mat"}
        idx = build_index(list(texts), list(texts.values()), lambda t: embed_texts(ce_weights, vocab, t, max_len=16)[0])
        q = embed_texts(ce_weights, vocab, ["the cat"], max_len=16)[0, 0]
        res = retrieve_and_rerank(q, idx, ce_scorer(ce_weights, vocab, "the cat", texts, 16), 3, 2)
        assert res.stage == RERANKED and len(res) == 2 and len(set(res.ids)) == 2


def test_results_tsv_round_trip(tmp_path):
    res = {"q1": SearchResult([("a", 0.5), ("b", 0.25)], RERANKED), "q2": SearchResult([("c", 1 / 3)])}
    write_results_tsv(tmp_path / "r.tsv", res.items(), header="seed=0")
    back = read_results_tsv(tmp_path / "r.tsv")
    assert back["q1"].hits == res["q1"].hits and back["q2"].hits == res["q2"].hits
    assert back["q1"].stage == RERANKED
