"""WordPiece tokenization and BERT-style single / paired input encoding."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
MAX_WORD_CHARS = 100
DEFAULT_MAX_LEN = 64
# ASCII punctuation is every printable non-alphanumeric character
_ASCII_WORDS = re.compile(r"[^\s!-/:-@\[-`{-~]+|[!-/:-@\[-`{-~]")


class VocabError(ValueError):
    pass


class Vocab:
    """Immutable token <-> id map with the four BERT specials resolved."""

    def __init__(self, tokens: Sequence[str]):
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise VocabError(f"duplicate token {tok!r} at line {i + 1}")
            index[tok] = i
        missing = [s for s in SPECIALS if s not in index]
        if missing:
            raise VocabError(f"vocab is missing special tokens {missing}")
        self._tokens = tuple(tokens)
        self._index = index
        self.pad_id, self.unk_id = index[PAD], index[UNK]
        self.cls_id, self.sep_id = index[CLS], index[SEP]
        self._pieces: dict[str, tuple[str, ...]] = {}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def token(self, i: int) -> str:
        return self._tokens[i]

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens


def load_vocab(path: str | Path) -> Vocab:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocab(lines)


def save_vocab(vocab: Vocab | Sequence[str], path: str | Path) -> None:
    tokens = vocab.tokens if isinstance(vocab, Vocab) else list(vocab)
    Path(path).write_text("".join(t + "\n" for t in tokens), encoding="utf-8")


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_split(text: str) -> list[str]:
    """Lowercase, split on whitespace, and make every punctuation mark its own word."""
    text = text.lower()
    if text.isascii():
        return _ASCII_WORDS.findall(text)
    words: list[str] = []
    for chunk in text.split():
        cur = []
        for ch in chunk:
            if _is_punctuation(ch):
                if cur:
                    words.append("".join(cur))
                    cur = []
                words.append(ch)
            else:
                cur.append(ch)
        if cur:
            words.append("".join(cur))
    return words


def wordpiece_word(word: str, vocab: Vocab) -> list[str]:
    cached = vocab._pieces.get(word)
    if cached is None:
        cached = vocab._pieces[word] = tuple(_greedy_pieces(word, vocab))
    return list(cached)


def _greedy_pieces(word: str, vocab: Vocab) -> list[str]:
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            sub = word[start:end] if start == 0 else "##" + word[start:end]
            if sub in vocab:
                piece = sub
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def wordpiece_tokenize(text: str, vocab: Vocab) -> list[str]:
    out: list[str] = []
    for word in basic_split(text):
        out.extend(wordpiece_word(word, vocab))
    return out


@dataclass(frozen=True)
class Encoding:
    """One encoded input, padded to ``max_len``.

    ``pool_mask`` marks the positions mean pooling averages over: real
    tokens other than [SEP] (and optionally other than [CLS] or the second
    copy of a self-paired sentence).
    """

    ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    special_mask: np.ndarray
    pool_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_real(self) -> int:
        return int(self.attention_mask.sum())


def _build(
    seq: list[int],
    segs: list[int],
    vocab: Vocab,
    max_len: int,
    include_cls: bool,
    pool_segment: int | None,
) -> Encoding:
    n = len(seq)
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    ids[:n] = seq
    seg = np.zeros(max_len, dtype=np.int64)
    seg[:n] = segs
    att = np.zeros(max_len, dtype=np.int64)
    att[:n] = 1
    special = ((ids == vocab.cls_id) | (ids == vocab.sep_id) | (att == 0)).astype(np.int64)
    pool = (att == 1) & (ids != vocab.sep_id)
    if not include_cls:
        pool[0] = False
    if pool_segment is not None:
        pool &= seg == pool_segment
    return Encoding(ids, seg, att, special, pool.astype(np.int64))


def encode_single(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN, include_cls: bool = True) -> Encoding:
    if max_len < 2:
        raise ValueError("encode_single needs max_len >= 2")
    toks = [vocab.id(t) for t in wordpiece_tokenize(text, vocab)][: max_len - 2]
    seq = [vocab.cls_id, *toks, vocab.sep_id]
    return _build(seq, [0] * len(seq), vocab, max_len, include_cls, None)


def truncate_pair(a: list, b: list, budget: int) -> tuple[list, list]:
    """Drop tail tokens from the longer side, one at a time, until len(a)+len(b) <= budget."""
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def encode_pair(
    a: str,
    b: str | None,
    vocab: Vocab,
    max_len: int = DEFAULT_MAX_LEN,
    self_pair: bool = False,
    include_cls: bool = True,
    pool_both_copies: bool = True,
) -> Encoding:
    """[CLS] a [SEP] b [SEP] [PAD]...; ``self_pair`` sets b := a."""
    if max_len < 3:
        raise ValueError("encode_pair needs max_len >= 3")
    if self_pair:
        b = a
    if b is None:
        raise ValueError("encode_pair needs b unless self_pair is set")
    ta = [vocab.id(t) for t in wordpiece_tokenize(a, vocab)]
    tb = ta if b is a else [vocab.id(t) for t in wordpiece_tokenize(b, vocab)]
    ta, tb = truncate_pair(ta, tb, max_len - 3)
    seq = [vocab.cls_id, *ta, vocab.sep_id, *tb, vocab.sep_id]
    segs = [0] * (len(ta) + 2) + [1] * (len(tb) + 1)
    return _build(seq, segs, vocab, max_len, include_cls, None if pool_both_copies else 0)


@dataclass(frozen=True)
class Batch:
    """Stacked encodings, trimmed to the longest real length in the batch."""

    ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    pool_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape


def stack(encodings: Sequence[Encoding], trim: bool = True) -> Batch:
    if not encodings:
        raise ValueError("cannot stack an empty list of encodings")
    width = max(e.num_real for e in encodings) if trim else len(encodings[0])
    return Batch(
        ids=np.stack([e.ids[:width] for e in encodings]),
        segment_ids=np.stack([e.segment_ids[:width] for e in encodings]),
        attention_mask=np.stack([e.attention_mask[:width] for e in encodings]),
        pool_mask=np.stack([e.pool_mask[:width] for e in encodings]),
    )
