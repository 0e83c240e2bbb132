"""
Infusing a shallow dual encoder
===============================

Copy a cross encoder's embedding tables and first layer into a two-layer
dual encoder, check the copy, train it with in-batch negatives next to a
randomly initialized twin, and compare retrieval, reranking and speed.
A few minutes on one core.
"""

import numpy as np

from ceinfuse.bench import speedup, time_embedding
from ceinfuse.checkpoint import infuse, verify_infusion
from ceinfuse.evaluation import hits_at_k, mrr_at_k
from ceinfuse.model import CE, DE, ModelConfig, ce_score_batch, embed_texts, init_random
from ceinfuse.pipeline import ce_pairs, mine_examples
from ceinfuse.retrieval import EmbeddingIndex, normalize_rows, rerank, search_many
from ceinfuse.synth import SynthSpec, build_vocab, generate
from ceinfuse.tokenizer import Vocab
from ceinfuse.training import CE_BINARY, DE_MNRL, TrainConfig, train

world = dict(n_topics=30, keywords_per_topic=12, query_len=(3, 5), doc_len=(6, 10), noise_ratio=0.2)
train_ds, _, _ = generate(SynthSpec(**world, corpus_size=1500, n_queries=3000, seed=1))
test_ds, _, _ = generate(SynthSpec(**world, corpus_size=1000, n_queries=200, seed=2))
vocab = Vocab(build_vocab([*train_ds.corpus.values(), *train_ds.queries.values(), *test_ds.corpus.values()], 4000))
cfg = ModelConfig(num_layers=4, hidden=32, heads=4, ff=128, vocab_size=len(vocab))

examples = mine_examples(train_ds, n_neg=4, window=50, seed=0)
ce = init_random(cfg, 0, CE)
train(ce, CE_BINARY, ce_pairs(examples, 1), TrainConfig(batch_size=32, lr=1e-3, max_len=32), vocab)

###############################################################################
# The surgery. Hidden states 0 and 1 of the new model must match the
# cross encoder exactly on any input, before training touches anything.
de_ce = infuse(ce, de_num_layers=2, k_copy=1, seed=0)
print(verify_infusion(ce, de_ce, 1, vocab, ["a probe", *list(test_ds.queries.values())[:5]]))
de_rand = init_random(cfg.replace(num_layers=2), 0, DE)

tc = TrainConfig(batch_size=16, lr=5e-4, max_len=32)
for model in (de_ce, de_rand):
    train(model, DE_MNRL, examples[:2000], tc, vocab)

###############################################################################
# Retrieve the top 50 with each dual encoder, then let the cross encoder
# reorder them. Whether reranking helps depends entirely on the cross
# encoder; this one saw a single short epoch and can make things worse.
doc_ids = test_ds.doc_ids
qids = list(test_ds.queries)
for name, model in (("DE-2-CE", de_ce), ("DE-2-Rand", de_rand)):
    docs = embed_texts(model, vocab, [test_ds.corpus[d] for d in doc_ids], max_len=32)[0]
    index = EmbeddingIndex(doc_ids, normalize_rows(docs))
    qs = embed_texts(model, vocab, [test_ds.queries[q] for q in qids], max_len=32)[0]
    retrieved = dict(zip(qids, search_many(index, qs, 50)))
    reranked = {}
    for q, res in retrieved.items():
        scorer = lambda ids, q=q: ce_score_batch(ce, vocab, [(test_ds.queries[q], test_ds.corpus[d]) for d in ids], 32)
        reranked[q] = rerank(res, scorer, 50)
    for stage, res in (("retrieve", retrieved), ("rerank", reranked)):
        print(f"{name:10s} {stage:8s} Hits@10 {hits_at_k(res, test_ds.qrels):.3f}  MRR@10 {mrr_at_k(res, test_ds.qrels):.3f}")

###############################################################################
# Inference cost scales with depth: time a full-depth model against the
# two-layer one on the same sentences, single-threaded.
sentences = list(test_ds.corpus.values())
deep = time_embedding(init_random(cfg.replace(num_layers=12), 0), vocab, sentences, threads=1)
shallow = time_embedding(de_ce, vocab, sentences, threads=1)
print(f"12-layer vs 2-layer speedup: {speedup(deep, shallow):.2f}x (medians {np.round([deep.median_seconds, shallow.median_seconds], 3)})")
