"""Exact cosine retrieval and the retrieve-then-rerank pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

RETRIEVED, RERANKED = "retrieved", "reranked"
DEFAULT_RERANK_DEPTH = 50


class EmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingIndex:
    doc_ids: list[str]
    matrix: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("doc ids must be unique")
        if self.matrix.shape[0] != len(self.doc_ids):
            raise ValueError("one embedding row per doc id")

    def __len__(self) -> int:
        return len(self.doc_ids)


@dataclass
class SearchResult:
    hits: list[tuple[str, float]]
    stage: str = RETRIEVED

    @property
    def ids(self) -> list[str]:
        return [d for d, _ in self.hits]

    def __len__(self) -> int:
        return len(self.hits)


def normalize_rows(x: np.ndarray, ids: Sequence[str] | None = None) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0)
    if zero.size:
        who = ids[zero[0]] if ids is not None else int(zero[0])
        raise EmbeddingError(f"zero-norm embedding for doc {who!r}")
    return x / norms


def build_index(
    doc_ids: Sequence[str],
    texts: Sequence[str],
    embedder: Callable[[Sequence[str]], np.ndarray],
    provenance: dict | None = None,
) -> EmbeddingIndex:
    """Embed every document with ``embedder`` (texts -> ``(N, d)``) and L2-normalize."""
    if not texts:
        raise ValueError("cannot index an empty corpus")
    emb = np.asarray(embedder(texts))
    bad = np.flatnonzero(~np.isfinite(emb).all(axis=1))
    if bad.size:
        raise EmbeddingError(f"non-finite embedding for doc {doc_ids[bad[0]]!r}")
    return EmbeddingIndex(list(doc_ids), normalize_rows(emb, doc_ids), dict(provenance or {}))


def _ranked(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top ``k`` scores, ties to the smaller index."""
    k = min(k, scores.shape[0])
    if k < scores.shape[0]:
        # partition first, then settle the boundary exactly: include every tie with the k-th score
        kth = np.partition(-scores, k - 1)[k - 1]
        cand = np.flatnonzero(-scores <= kth)
    else:
        cand = np.arange(scores.shape[0])
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


def search(index: EmbeddingIndex, query_emb: np.ndarray, k: int) -> SearchResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    q = normalize_rows(np.asarray(query_emb, dtype=index.matrix.dtype)[None])[0]
    scores = index.matrix @ q
    top = _ranked(scores, k)
    return SearchResult([(index.doc_ids[i], float(scores[i])) for i in top], RETRIEVED)


def search_many(index: EmbeddingIndex, query_embs: np.ndarray, k: int) -> list[SearchResult]:
    q = normalize_rows(np.asarray(query_embs, dtype=index.matrix.dtype))
    scores = q @ index.matrix.T
    out = []
    for row in scores:
        top = _ranked(row, k)
        out.append(SearchResult([(index.doc_ids[i], float(row[i])) for i in top], RETRIEVED))
    return out


def rerank(
    candidates: SearchResult,
    scorer: Callable[[Sequence[str]], np.ndarray],
    depth: int = DEFAULT_RERANK_DEPTH,
) -> SearchResult:
    """Rescore the top ``depth`` candidates and sort them descending.

    ``scorer`` maps candidate doc ids to scores (typically a cross encoder
    bound to one query). Ties keep retrieval order; candidates past
    ``depth`` follow unchanged.
    """
    depth = min(depth, len(candidates))
    head, tail = candidates.hits[:depth], candidates.hits[depth:]
    if not head:
        return SearchResult(list(tail), RERANKED)
    scores = np.asarray(scorer([d for d, _ in head]), dtype=np.float64)
    order = sorted(range(len(head)), key=lambda i: (-scores[i], i))
    return SearchResult([(head[i][0], float(scores[i])) for i in order] + list(tail), RERANKED)


def ce_scorer(ce_weights, vocab, query: str, doc_texts: dict[str, str], max_len: int = 64):
    """Bind a cross encoder to one query, for use with :func:`rerank`."""
    from .model import ce_score_batch

    if not ce_weights.has_head:
        raise ValueError("reranking needs cross-encoder weights with a head")

    def score(ids: Sequence[str]) -> np.ndarray:
        return ce_score_batch(ce_weights, vocab, [(query, doc_texts[d]) for d in ids], max_len)

    return score


def retrieve_and_rerank(
    query_emb: np.ndarray,
    index: EmbeddingIndex,
    scorer: Callable[[Sequence[str]], np.ndarray],
    k_retrieve: int = DEFAULT_RERANK_DEPTH,
    k_final: int = 10,
) -> SearchResult:
    retrieved = search(index, query_emb, k_retrieve)
    reranked = rerank(retrieved, scorer, depth=k_retrieve)
    return SearchResult(reranked.hits[:k_final], RERANKED)


def write_results_tsv(path: str | Path, results: Iterable[tuple[str, SearchResult]], header: str | None = None) -> None:
    """TSV rows: query_id, doc_id, rank (1-based), score, stage."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("query_id\tdoc_id\trank\tscore\tstage\n")
        for qid, res in results:
            for rank, (doc, sc) in enumerate(res.hits, 1):
                fh.write(f"{qid}\t{doc}\t{rank}\t{sc!r}\t{res.stage}\n")


def read_results_tsv(path: str | Path) -> dict[str, SearchResult]:
    out: dict[str, SearchResult] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("query_id\t"):
                continue
            qid, doc, _rank, sc, stage = line.rstrip("\n").split("\t")
            out.setdefault(qid, SearchResult([], stage)).hits.append((doc, float(sc)))
    return out
