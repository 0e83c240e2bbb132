"""Synthetic topical retrieval data and vocabulary construction.

A *world* fixes the word inventory: each topic owns a disjoint set of
keywords and a shared pool of noise words sits on top. Datasets drawn from
the same world (training pairs, several evaluation sets) therefore share
their semantics, which is what lets a model trained on one transfer to the
others.

A text of topic ``t`` draws each word from the noise pool with probability
``noise_ratio`` and from ``t``'s keywords otherwise. Documents of other
topics never share a keyword with a query. Relevance comes in two flavours:
``"keyword"`` requires the query's topic plus at least one shared keyword,
``"topic"`` accepts every document of the query's topic. The second leaves a
gap between lexical overlap and relevance that only learned models close.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import Dataset, write_jsonl, write_pairs, write_qrels
from .tokenizer import SPECIALS, basic_split, save_vocab

_ONSETS = "b c d f g h j k l m n p r s t v w z br cl dr fl gr kr pl st tr".split()
_VOWELS = "a e i o u ai ea ou".split()
_CODAS = ["", "", "n", "r", "s", "l", "m", "x", "t"]


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_topics: int = 200
    keywords_per_topic: int = 16
    query_len: tuple[int, int] = (3, 5)
    doc_len: tuple[int, int] = (8, 14)
    noise_ratio: float = 0.3
    corpus_size: int = 5000
    n_queries: int = 500
    seed: int = 0
    world_seed: int = 0
    noise_words: int = 300
    relevance: str = "keyword"

    def __post_init__(self):
        if self.relevance not in ("keyword", "topic"):
            raise InfeasibleSpecError(f"relevance must be 'keyword' or 'topic', got {self.relevance!r}")
        if self.n_topics < 2:
            raise InfeasibleSpecError("need at least 2 topics")
        if not 0 <= self.noise_ratio < 1:
            raise InfeasibleSpecError("noise_ratio must be in [0, 1)")
        if self.keywords_per_topic < 1 or self.noise_words < 1:
            raise InfeasibleSpecError("need keywords and noise words")
        lo, hi = self.query_len
        dlo, dhi = self.doc_len
        if not (1 <= lo <= hi and 1 <= dlo <= dhi):
            raise InfeasibleSpecError("length ranges must satisfy 1 <= min <= max")
        if hi > self.keywords_per_topic or dhi > self.keywords_per_topic:
            raise InfeasibleSpecError(
                f"lengths up to {max(hi, dhi)} need at least that many keywords per topic "
                f"(have {self.keywords_per_topic})"
            )
        if self.corpus_size < self.n_topics:
            raise InfeasibleSpecError("corpus must hold at least one document per topic")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class World:
    topics: tuple[tuple[str, ...], ...]
    noise: tuple[str, ...]


def _pseudo_words(rng: np.random.Generator, n: int) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < n:
        syll = rng.integers(2, 4)
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(syll)
        )
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def make_world(spec: SynthSpec) -> World:
    rng = np.random.default_rng(spec.world_seed)
    words = _pseudo_words(rng, spec.n_topics * spec.keywords_per_topic + spec.noise_words)
    k = spec.keywords_per_topic
    topics = tuple(tuple(words[t * k : (t + 1) * k]) for t in range(spec.n_topics))
    return World(topics, tuple(words[spec.n_topics * k :]))


def _text(rng: np.random.Generator, world: World, topic: int, length: tuple[int, int], noise: float) -> tuple[str, set[str]]:
    n = int(rng.integers(length[0], length[1] + 1))
    kws = world.topics[topic]
    words, used = [], set()
    for _ in range(n):
        if rng.random() < noise:
            words.append(world.noise[rng.integers(len(world.noise))])
        else:
            w = kws[rng.integers(len(kws))]
            words.append(w)
            used.add(w)
    return " ".join(words), used


def generate(spec: SynthSpec, name: str = "synth") -> tuple[Dataset, list[int], list[int]]:
    """Dataset plus the topic of every doc and query (in id order)."""
    world = make_world(spec)
    rng = np.random.default_rng(spec.seed)
    corpus, doc_topic, doc_kw = {}, [], []
    # every topic gets at least one document
    topics = np.concatenate([np.arange(spec.n_topics), rng.integers(0, spec.n_topics, spec.corpus_size - spec.n_topics)])
    rng.shuffle(topics)
    for i, t in enumerate(topics):
        text, kw = _text(rng, world, int(t), spec.doc_len, spec.noise_ratio)
        corpus[f"d{i}"] = text
        doc_topic.append(int(t))
        doc_kw.append(kw)
    by_topic: dict[int, list[int]] = {}
    for i, t in enumerate(doc_topic):
        by_topic.setdefault(t, []).append(i)

    def is_relevant(doc_words: set[str], query_words: set[str]) -> bool:
        return spec.relevance == "topic" or bool(doc_words & query_words)

    queries, qrels, q_topic = {}, {}, []
    attempts = 0
    while len(queries) < spec.n_queries:
        attempts += 1
        if attempts > 100 * spec.n_queries:
            raise InfeasibleSpecError("could not draw queries with relevant documents")
        t = int(rng.integers(spec.n_topics))
        text, kw = _text(rng, world, t, spec.query_len, spec.noise_ratio)
        if not kw:
            continue
        rel = {f"d{i}" for i in by_topic.get(t, ()) if is_relevant(doc_kw[i], kw)}
        if not rel:
            continue
        qid = f"q{len(queries)}"
        queries[qid] = text
        qrels[qid] = rel
        q_topic.append(t)
    return Dataset(name, corpus, queries, qrels), doc_topic, q_topic


def training_pairs(ds: Dataset, seed: int = 0) -> list[tuple[str, str, list[str]]]:
    """(query, one positive text, all positive doc ids) for every judged query."""
    rng = np.random.default_rng(seed)
    out = []
    for qid, text in ds.judged_queries().items():
        rel = sorted(ds.qrels[qid], key=lambda d: int(d[1:]) if d[1:].isdigit() else d)
        pick = rel[int(rng.integers(len(rel)))]
        out.append((text, ds.corpus[pick], rel))
    return out


def synth_data(spec: SynthSpec, out_dir: str | Path, name: str | None = None, header: str | None = None) -> Dataset:
    """Write corpus.jsonl, queries.jsonl, qrels.tsv and pairs.tsv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, _, _ = generate(spec, name or out.name)
    write_jsonl(out / "corpus.jsonl", ds.corpus, header)
    write_jsonl(out / "queries.jsonl", ds.queries, header)
    write_qrels(out / "qrels.tsv", ds.qrels, header)
    write_pairs(out / "pairs.tsv", [(q, p) for q, p, _ in training_pairs(ds, spec.seed)], header)
    return ds


def build_vocab(texts: Iterable[str], size: int, suffix_share: float = 0.1) -> list[str]:
    """Frequency-ranked vocabulary: 4 specials, whole words, then "##" suffixes.

    When every distinct word fits in ``size - 4`` slots all are kept. Otherwise
    a ``suffix_share`` of the budget holds the most frequent suffixes left
    after splitting each dropped word at its longest kept prefix; words with
    no such split fall back to [UNK]. Ties break alphabetically, so the
    result depends only on the texts.
    """
    counts = Counter(w for t in texts for w in basic_split(t))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    budget = size - len(SPECIALS)
    if budget < 1:
        raise ValueError(f"vocab size {size} leaves no room beyond the {len(SPECIALS)} specials")
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    if len(ranked) <= budget:
        return [*SPECIALS, *ranked]
    n_suffix = int(budget * suffix_share)
    words = ranked[: budget - n_suffix]
    kept = set(words)
    suffixes: Counter[str] = Counter()
    for w in ranked[budget - n_suffix :]:
        for cut in range(len(w) - 1, 0, -1):
            if w[:cut] in kept:
                suffixes["##" + w[cut:]] += counts[w]
                break
    pieces = sorted(suffixes, key=lambda s: (-suffixes[s], s))[:n_suffix]
    return [*SPECIALS, *words, *pieces]


def write_vocab(texts: Iterable[str], size: int, path: str | Path) -> list[str]:
    tokens = build_vocab(texts, size)
    save_vocab(tokens, path)
    return tokens
