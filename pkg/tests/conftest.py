from __future__ import annotations

import numpy as np
import pytest

from ceinfuse.model import CE, DE, ModelConfig, init_random
from ceinfuse.tokenizer import SPECIALS, Vocab

WORDS = "the cat sat on mat dog ran far away red blue green un ##der ##stand".split()


@pytest.fixture
def vocab() -> Vocab:
    return Vocab([*SPECIALS, *WORDS])


@pytest.fixture
def tiny_config(vocab) -> ModelConfig:
    return ModelConfig(num_layers=2, hidden=8, heads=2, ff=16, vocab_size=len(vocab), max_positions=32)


@pytest.fixture
def de_weights(tiny_config):
    return init_random(tiny_config, seed=1, role=DE)


@pytest.fixture
def ce_weights(tiny_config):
    return init_random(tiny_config, seed=2, role=CE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def overfit_run(seed: int, steps: int = 500):
    """MNRL on 8 random query/positive pairs; returns the loss curve."""
    from ceinfuse.bm25 import TrainExample
    from ceinfuse.training import DE_MNRL, TrainConfig, train

    words = [f"w{i}" for i in range(40)]
    v = Vocab([*SPECIALS, *words])
    r = np.random.default_rng(seed)
    ex = [TrainExample(" ".join(r.choice(words, 4)), " ".join(r.choice(words, 6))) for _ in range(8)]
    w = init_random(ModelConfig(num_layers=2, hidden=32, heads=4, ff=64, vocab_size=len(v), max_positions=16), seed)
    cfg = TrainConfig(batch_size=8, n_neg=0, lr=1e-3, max_steps=steps, max_len=16, seed=seed)
    return train(w, DE_MNRL, ex, cfg, v)[1]


def tiny_pipeline_config(out_dir, seed: int = 0, bench: bool = False):
    """A pipeline config that runs end to end in a few seconds."""
    from ceinfuse.pipeline import PipelineConfig
    from ceinfuse.synth import SynthSpec
    from ceinfuse.training import TrainConfig

    world = dict(n_topics=6, keywords_per_topic=6, query_len=(2, 3), doc_len=(3, 6), noise_ratio=0.2, noise_words=20)
    return PipelineConfig(
        out_dir=str(out_dir),
        seed=seed,
        train_spec=SynthSpec(**world, corpus_size=60, n_queries=64),
        eval_specs={"a": SynthSpec(**world, corpus_size=40, n_queries=12), "b": SynthSpec(**{**world, "noise_ratio": 0.4}, corpus_size=40, n_queries=12)},
        vocab_size=200,
        ce_model=ModelConfig(num_layers=2, hidden=16, heads=2, ff=32),
        ce_train=TrainConfig(batch_size=8, lr=1e-3),
        de_train=TrainConfig(batch_size=8, lr=1e-3),
        n_neg=2,
        de_examples=32,
        window=10,
        rerank_depth=20,
        max_len=16,
        bench=bench,
        bench_sentences=50,
    )


# acceptance lines are collected here and echoed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
