"""Dataset containers and the on-disk formats: JSONL texts, TSV qrels and pairs.

Every reader skips lines starting with ``#``, which is where writers put
their provenance header (seed and config hash).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

Qrels = dict[str, set[str]]


@dataclass
class Dataset:
    name: str
    corpus: dict[str, str]
    queries: dict[str, str]
    qrels: Qrels

    @property
    def doc_ids(self) -> list[str]:
        return list(self.corpus)

    def judged_queries(self) -> dict[str, str]:
        return {q: t for q, t in self.queries.items() if self.qrels.get(q)}


def _lines(path: str | Path) -> Iterable[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and not line.startswith("#"):
                yield line


def _header(fh, header: str | None) -> None:
    if header:
        fh.write(f"# {header}\n")


def read_jsonl(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in _lines(path):
        rec = json.loads(line)
        if rec["id"] in out:
            raise ValueError(f"{path}: duplicate id {rec['id']!r}")
        out[str(rec["id"])] = rec["text"]
    return out


def write_jsonl(path: str | Path, records: dict[str, str], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _header(fh, header)
        for i, text in records.items():
            fh.write(json.dumps({"id": i, "text": text}, ensure_ascii=False) + "\n")


def read_qrels(path: str | Path) -> Qrels:
    """``query_id<TAB>doc_id<TAB>relevance``; relevance > 0 counts as relevant."""
    out: Qrels = {}
    for line in _lines(path):
        parts = line.split("\t")
        if parts[0] == "query_id":
            continue
        qid, did, rel = parts[0], parts[1], float(parts[2]) if len(parts) > 2 else 1.0
        if rel > 0:
            out.setdefault(qid, set()).add(did)
    return out


def write_qrels(path: str | Path, qrels: Qrels, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _header(fh, header)
        for qid, docs in qrels.items():
            for did in sorted(docs):
                fh.write(f"{qid}\t{did}\t1\n")


def read_pairs(path: str | Path) -> list[tuple[str, str]]:
    out = []
    for line in _lines(path):
        q, _, pos = line.partition("\t")
        out.append((q, pos))
    return out


def write_pairs(path: str | Path, pairs: Iterable[tuple[str, str]], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _header(fh, header)
        for q, pos in pairs:
            fh.write(f"{q}\t{pos}\n")


def load_dataset(directory: str | Path, name: str | None = None) -> Dataset:
    d = Path(directory)
    qrels = read_qrels(d / "qrels.tsv")
    queries = read_jsonl(d / "queries.jsonl")
    dropped = [q for q in queries if not qrels.get(q)]
    if dropped:
        log.warning("%s: %d queries without relevance judgments are dropped", d, len(dropped))
    return Dataset(name or d.name, read_jsonl(d / "corpus.jsonl"), queries, qrels)
