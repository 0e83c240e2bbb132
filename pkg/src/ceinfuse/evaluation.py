"""Hits@K / MRR@K, layer-wise sweeps, paired t-tests and the comparison report."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .data import Dataset, Qrels
from .model import CE, DE, EncoderWeights, embed_texts
from .retrieval import EmbeddingIndex, SearchResult, normalize_rows, search_many
from .tokenizer import Vocab

log = logging.getLogger(__name__)

Rankings = Mapping[str, "SearchResult | Sequence[str]"]


def _ids(r) -> list[str]:
    return r.ids if isinstance(r, SearchResult) else list(r)


def _judged(results: Rankings, qrels: Qrels) -> list[str]:
    unjudged = [q for q in results if not qrels.get(q)]
    if unjudged:
        log.warning("dropping %d queries without relevance judgments", len(unjudged))
    qids = [q for q in results if qrels.get(q)]
    if not qids:
        raise ValueError("no judged queries to evaluate")
    return qids


def first_relevant_rank(ranking: Sequence[str], relevant: set[str], k: int) -> int | None:
    for rank, doc in enumerate(ranking[:k], 1):
        if doc in relevant:
            return rank
    return None


def hits_at_k(results: Rankings, qrels: Qrels, k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    qids = _judged(results, qrels)
    hit = sum(first_relevant_rank(_ids(results[q]), qrels[q], k) is not None for q in qids)
    return hit / len(qids)


def mrr_at_k(results: Rankings, qrels: Qrels, k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    qids = _judged(results, qrels)
    total = 0.0
    for q in qids:
        r = first_relevant_rank(_ids(results[q]), qrels[q], k)
        total += 1.0 / r if r else 0.0
    return total / len(qids)


# -- significance -----------------------------------------------------------


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    n: int


def student_t_sf2(t: float, df: int) -> float:
    """Two-tailed p-value P(|T| >= |t|) via the regularized incomplete beta."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTest:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise DegenerateInputError("paired t-test needs n >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TTest(0.0, 1.0, n)
        raise DegenerateInputError("all paired differences identical; t is undefined")
    t = float(mean / (sd / math.sqrt(n)))
    return TTest(t, student_t_sf2(t, n - 1), n)


# -- layer sweep ------------------------------------------------------------


@dataclass
class SweepRow:
    layer: int
    hits: float
    mrr: float


def layer_sweep(
    weights: EncoderWeights,
    vocab: Vocab,
    dataset: Dataset,
    mode: str = DE,
    k: int = 10,
    max_len: int = 64,
    batch_size: int = 128,
) -> list[SweepRow]:
    """Retrieval quality when pooling each hidden-state index 0..L.

    ``mode`` DE encodes every text alone; CE self-pairs it. Docs and queries
    are embedded at the same layer.
    """
    if mode not in (DE, CE):
        raise ValueError(f"unknown sweep mode {mode!r}")
    layers = list(range(weights.config.num_layers + 1))
    doc_ids = dataset.doc_ids
    queries = dataset.judged_queries()
    qids = list(queries)
    docs = embed_texts(weights, vocab, [dataset.corpus[d] for d in doc_ids], layers, mode, max_len, batch_size)
    qs = embed_texts(weights, vocab, [queries[q] for q in qids], layers, mode, max_len, batch_size)
    rows = []
    for layer in layers:
        index = EmbeddingIndex(doc_ids, normalize_rows(docs[layer], doc_ids), {"layer": layer, "mode": mode})
        results = dict(zip(qids, search_many(index, qs[layer], k)))
        rows.append(SweepRow(layer, hits_at_k(results, dataset.qrels, k), mrr_at_k(results, dataset.qrels, k)))
    return rows


# -- report -----------------------------------------------------------------


@dataclass
class ReportRow:
    dataset: str
    model: str
    stage: str
    layer: int
    hits: float
    mrr: float
    speedup: float | None = None


@dataclass
class EvalReport:
    k: int = 10
    rows: list[ReportRow] = field(default_factory=list)
    sweeps: dict[str, list[tuple[str, SweepRow]]] = field(default_factory=dict)
    significance: list[dict] = field(default_factory=list)

    def columns(self) -> list[str]:
        return ["dataset", "model", "stage", "layer", f"hits@{self.k}", f"mrr@{self.k}", "speedup"]

    def metric(self, dataset: str, model: str, stage: str, which: str = "hits") -> float:
        for r in self.rows:
            if (r.dataset, r.model, r.stage) == (dataset, model, stage):
                return getattr(r, which)
        raise KeyError((dataset, model, stage))

    def vector(self, model: str, stage: str, which: str = "hits") -> list[float]:
        """Per-dataset metric vector in dataset order, for paired tests."""
        return [getattr(r, which) for r in self.rows if r.model == model and r.stage == stage]


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_report(report: EvalReport, path: str | Path, header: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(report.columns())
        for r in report.rows:
            w.writerow([r.dataset, r.model, r.stage, r.layer, _fmt(r.hits), _fmt(r.mrr), _fmt(r.speedup)])


def read_report(path: str | Path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    cols = next(reader)
    k = int(cols[4].split("@")[1])
    rep = EvalReport(k=k)
    for ds, model, stage, layer, hits, mrr, sp in reader:
        rep.rows.append(ReportRow(ds, model, stage, int(layer), float(hits), float(mrr), float(sp) if sp else None))
    return rep


def write_sweep(path: str | Path, rows: Sequence[tuple[str, SweepRow]], k: int = 10, header: str | None = None) -> None:
    """Layer-sweep CSV for one model: dataset, layer, hits@k, mrr@k."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "layer", f"hits@{k}", f"mrr@{k}"])
        for ds, r in rows:
            w.writerow([ds, r.layer, repr(float(r.hits)), repr(float(r.mrr))])


def write_significance(path: str | Path, rows: Sequence[dict], header: str | None = None) -> None:
    cols = ["comparison", "metric", "t", "p", "n", "note"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c)) for c in cols})


def baseline_gaps(report: EvalReport, baseline: str, candidate: str, stage: str) -> list[dict]:
    """Flag rows where ``candidate`` is within .01 absolute and within 1% relative of ``baseline``.

    The two thresholds are reported separately because they disagree when
    the baseline metric is small or large.
    """
    out = []
    datasets = list(dict.fromkeys(r.dataset for r in report.rows))
    for ds in datasets:
        for which in ("hits", "mrr"):
            try:
                base = report.metric(ds, baseline, stage, which)
                cand = report.metric(ds, candidate, stage, which)
            except KeyError:
                continue
            out.append({
                "dataset": ds, "stage": stage, "metric": f"{which}@{report.k}",
                "baseline": base, "candidate": cand,
                "within_0.01": base - cand <= 0.01 + 1e-12,
                "within_1pct": base - cand <= 0.01 * base + 1e-12,
            })
    return out
