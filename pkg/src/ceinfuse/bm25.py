"""Okapi BM25 over an inverted index, plus hard-negative mining."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import basic_split

log = logging.getLogger(__name__)


@dataclass
class Bm25Index:
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: np.ndarray
    avgdl: float
    k1: float = 1.2
    b: float = 0.75
    dedup_query: bool = True

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def _query_terms(self, query: str) -> list[str]:
        terms = basic_split(query)
        if self.dedup_query:
            terms = list(dict.fromkeys(terms))
        return terms


def build(corpus: Sequence[str], k1: float = 1.2, b: float = 0.75, dedup_query: bool = True) -> Bm25Index:
    if not corpus:
        raise ValueError("cannot build a BM25 index over an empty corpus")
    postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
    lengths = np.zeros(len(corpus), dtype=np.float64)
    for doc_id, text in enumerate(corpus):
        terms = basic_split(text)
        lengths[doc_id] = len(terms)
        for term, tf in Counter(terms).items():
            postings[term].append((doc_id, tf))
    avgdl = float(lengths.mean())
    if avgdl <= 0:
        raise ValueError("corpus contains no terms")
    return Bm25Index(dict(postings), lengths, avgdl, k1, b, dedup_query)


def _term_weight(index: Bm25Index, tf, dl):
    k1, b = index.k1, index.b
    return tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / index.avgdl))


def score(index: Bm25Index, query: str, doc_id: int) -> float:
    if not 0 <= doc_id < index.n_docs:
        raise KeyError(f"unknown doc id {doc_id}")
    total = 0.0
    dl = index.doc_lengths[doc_id]
    for term in index._query_terms(query):
        for d, tf in index.postings.get(term, ()):
            if d == doc_id:
                total += index.idf(term) * _term_weight(index, tf, dl)
                break
    return total


def score_all(index: Bm25Index, query: str) -> np.ndarray:
    scores = np.zeros(index.n_docs)
    for term in index._query_terms(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        ids = np.fromiter((d for d, _ in plist), dtype=np.int64, count=len(plist))
        tfs = np.fromiter((t for _, t in plist), dtype=np.float64, count=len(plist))
        scores[ids] += index.idf(term) * _term_weight(index, tfs, index.doc_lengths[ids])
    return scores


def top_k(index: Bm25Index, query: str, k: int) -> list[tuple[int, float]]:
    """Exact top-k by score; ties go to the smaller doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = score_all(index, query)
    order = np.lexsort((np.arange(index.n_docs), -scores))[:k]
    return [(int(i), float(scores[i])) for i in order]


@dataclass
class TrainExample:
    query: str
    positive: str
    negatives: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.query or not self.positive:
            raise ValueError("query and positive must be non-empty")


def mine_hard_negatives(
    index: Bm25Index,
    corpus: Sequence[str],
    pairs: Iterable[tuple[str, str, Iterable[int]]],
    n_neg: int = 4,
    window: int = 50,
    seed: int = 0,
) -> list[TrainExample]:
    """BM25 hard negatives for (query, positive text, positive doc ids) triples.

    For each query the top ``window`` hits minus its positives form the
    candidate pool; ``n_neg`` are drawn without replacement. A pool smaller
    than ``n_neg`` is taken whole with a warning.
    """
    if window < n_neg:
        raise ValueError("window must be >= n_neg")
    rng = np.random.default_rng(seed)
    out = []
    for query, positive, pos_ids in pairs:
        pos = set(pos_ids)
        if not pos:
            raise ValueError(f"query {query!r} has no positives")
        hits = top_k(index, query, window + len(pos))
        pool = [d for d, _ in hits if d not in pos][:window]
        if len(pool) < n_neg:
            log.warning("query %r: only %d negative candidates (wanted %d)", query, len(pool), n_neg)
            chosen = pool
        else:
            chosen = [pool[i] for i in sorted(rng.choice(len(pool), size=n_neg, replace=False))]
        out.append(TrainExample(query, positive, [corpus[d] for d in chosen]))
    return out
