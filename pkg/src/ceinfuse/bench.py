"""Wall-clock embedding throughput and speedup ratios."""

from __future__ import annotations

import statistics
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Sequence

from threadpoolctl import threadpool_limits

from .model import DE, EncoderWeights, embed_texts
from .tokenizer import Vocab

MIN_RUNS = 5


class InvalidComparisonError(ValueError):
    pass


@dataclass
class BenchResult:
    model_id: str
    corpus_size: int
    batch_size: int
    threads: int | None
    run_seconds: list[float] = field(default_factory=list)

    @property
    def median_seconds(self) -> float:
        return statistics.median(self.run_seconds)

    @property
    def sentences_per_sec(self) -> float:
        return self.corpus_size / self.median_seconds


def time_embedding(
    weights: EncoderWeights,
    vocab: Vocab,
    corpus: Sequence[str],
    batch_size: int = 64,
    runs: int = MIN_RUNS,
    threads: int | None = 1,
    model_id: str = "",
    max_len: int = 64,
) -> BenchResult:
    """Time full-corpus embedding passes (tokenize + forward + pool).

    One extra warmup pass runs first and is discarded; ``runs`` kept passes
    follow. ``threads`` pins the BLAS pool for the whole measurement
    (``None`` leaves it alone).
    """
    if runs < MIN_RUNS:
        raise ValueError(f"need at least {MIN_RUNS} timed runs, got {runs}")
    if not corpus:
        raise ValueError("cannot benchmark an empty corpus")
    res = BenchResult(model_id, len(corpus), batch_size, threads)
    limit = threadpool_limits(limits=threads) if threads is not None else nullcontext()
    with limit:
        for i in range(runs + 1):
            t0 = time.perf_counter()
            embed_texts(weights, vocab, corpus, mode=DE, max_len=max_len, batch_size=batch_size)
            elapsed = time.perf_counter() - t0
            if i:
                res.run_seconds.append(elapsed)
    return res


def speedup(base: BenchResult, fast: BenchResult) -> float:
    """base median / fast median; both must share corpus, batch and threads."""
    if (base.corpus_size, base.batch_size, base.threads) != (fast.corpus_size, fast.batch_size, fast.threads):
        raise InvalidComparisonError(
            f"cannot compare {base.model_id} ({base.corpus_size}, {base.batch_size}, {base.threads}) "
            f"with {fast.model_id} ({fast.corpus_size}, {fast.batch_size}, {fast.threads})"
        )
    return base.median_seconds / fast.median_seconds
