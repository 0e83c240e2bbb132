"""
Building blocks: kernels, tokens and self-pairing
=================================================

A short tour of the pieces everything else is made of. Run with
``python3 demos/01_building_blocks.py``.
"""

import numpy as np

from ceinfuse import numkernel as nk
from ceinfuse.model import CE, ModelConfig, embed_sentence_ce, embed_sentence_de, cosine, init_random
from ceinfuse.tokenizer import Vocab, encode_pair, encode_single, wordpiece_tokenize

# Every kernel has a hand-written backward. ``grad_check`` compares it with
# central finite differences in float64.
for name in sorted(nk.KERNELS):
    err = nk.grad_check(name)
    print(f"{name:20s}", "skipped (flat row)" if err is None else f"rel err {err:.1e}")

# Softmax subtracts the row max first, so huge logits are harmless.
print(nk.softmax_rows(np.array([[1000.0, 0.0, -1000.0]])))

###############################################################################
# WordPiece splits unknown words greedily into the longest known pieces.
vocab = Vocab(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "un", "##der", "##stand", "cats", "purr", "."])
print(wordpiece_tokenize("Understand cats.", vocab))

# A dual encoder reads one sentence. A cross encoder reads a pair, and the
# trick for getting a sentence embedding out of it is to pair the sentence
# with itself.
single = encode_single("cats purr", vocab, max_len=10)
paired = encode_pair("cats purr", None, vocab, max_len=10, self_pair=True)
print("single:", [vocab.token(i) for i in single.ids])
print("paired:", [vocab.token(i) for i in paired.ids], "segments", paired.segment_ids)
print("pooled positions:", paired.pool_mask)

###############################################################################
# The same weights give different embeddings for the two encodings, because
# the self-paired tokens attend to a second copy of the sentence.
w = init_random(ModelConfig(num_layers=2, hidden=16, heads=2, ff=32, vocab_size=len(vocab)), seed=0, role=CE)
for layer in range(3):
    de = embed_sentence_de(w, vocab, "cats purr", layer)
    ce = embed_sentence_ce(w, vocab, "cats purr", layer)
    print(f"layer {layer}: cosine(single, self-pair) = {cosine(de, ce):.4f}")
