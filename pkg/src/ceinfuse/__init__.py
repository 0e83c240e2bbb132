"""Layer-wise probing of cross encoders and cross-encoder-infused dual encoders.

A small numpy BERT-style encoder with hand-written backward passes, BM25
hard-negative mining, MNRL and binary training, layer surgery, exact cosine
retrieval with reranking, IR metrics and throughput benchmarks.
"""

from .model import CE, DE, EncoderWeights, ModelConfig, forward, init_random
from .tokenizer import Vocab, encode_pair, encode_single, load_vocab

__all__ = [
    "CE", "DE", "EncoderWeights", "ModelConfig", "Vocab", "encode_pair", "encode_single", "forward",
    "init_random", "load_vocab",
]
__version__ = "0.1.0"
