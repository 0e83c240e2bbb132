"""BERT-style post-layer-norm encoder with per-layer hidden-state capture.

Weights live in a flat ``name -> ndarray`` dict (see :func:`tensor_shapes`)
so that checkpointing and layer surgery are plain dictionary operations.
All arrays are ``(batch, T, d)``; single encodings are lifted to batch 1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numkernel as nk
from .tokenizer import Batch, Encoding, Vocab, encode_pair, encode_single, stack

DE, CE = "DE", "CE"
LAYER_PARTS = (
    "attn.q.w", "attn.q.b", "attn.k.w", "attn.k.b", "attn.v.w", "attn.v.b",
    "attn.o.w", "attn.o.b", "attn.ln.gamma", "attn.ln.beta",
    "ffn.in.w", "ffn.in.b", "ffn.out.w", "ffn.out.b", "ffn.ln.gamma", "ffn.ln.beta",
)
HEAD_PARTS = ("head.pooler.w", "head.pooler.b", "head.classifier.w", "head.classifier.b")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden: int = 64
    heads: int = 4
    ff: int = 256
    vocab_size: int = 1000
    max_positions: int = 64
    type_vocab: int = 2
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if min(self.hidden, self.ff, self.vocab_size, self.max_positions) < 1:
            raise ConfigError("dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        types = {f: type(v) for f, v in asdict(cls()).items()}
        return cls(**{k: types[k](v) for k, v in d.items() if k in types})


def layer_key(i: int, part: str) -> str:
    return f"layers.{i}.{part}"


def tensor_shapes(config: ModelConfig, role: str) -> dict[str, tuple[int, ...]]:
    d, ff = config.hidden, config.ff
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.word": (config.vocab_size, d),
        "embeddings.position": (config.max_positions, d),
        "embeddings.segment": (config.type_vocab, d),
        "embeddings.ln.gamma": (d,),
        "embeddings.ln.beta": (d,),
    }
    per_layer = {
        "attn.q.w": (d, d), "attn.q.b": (d,), "attn.k.w": (d, d), "attn.k.b": (d,),
        "attn.v.w": (d, d), "attn.v.b": (d,), "attn.o.w": (d, d), "attn.o.b": (d,),
        "attn.ln.gamma": (d,), "attn.ln.beta": (d,),
        "ffn.in.w": (d, ff), "ffn.in.b": (ff,), "ffn.out.w": (ff, d), "ffn.out.b": (d,),
        "ffn.ln.gamma": (d,), "ffn.ln.beta": (d,),
    }
    for i in range(config.num_layers):
        for part in LAYER_PARTS:
            shapes[layer_key(i, part)] = per_layer[part]
    if role == CE:
        shapes.update({
            "head.pooler.w": (d, d), "head.pooler.b": (d,),
            "head.classifier.w": (d,), "head.classifier.b": (1,),
        })
    elif role != DE:
        raise ConfigError(f"unknown role {role!r}")
    return shapes


@dataclass
class EncoderWeights:
    config: ModelConfig
    role: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def has_head(self) -> bool:
        return "head.classifier.w" in self.tensors

    @property
    def dtype(self):
        return self.tensors["embeddings.word"].dtype

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, self.role, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "EncoderWeights":
        return EncoderWeights(self.config, self.role, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def validate(self) -> None:
        expected = tensor_shapes(self.config, self.role)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ConfigError(f"tensor set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.tensors[name].shape} != config {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ConfigError(f"{name}: non-finite values")

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) restricted to ±bound·std by redrawing out-of-range samples."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return (x * std).astype(np.float32)


def init_tensor(name: str, shape, rng: np.random.Generator, std: float) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape, np.float32)
    if name.endswith(".beta") or name.endswith(".b"):
        return np.zeros(shape, np.float32)
    return truncated_normal(rng, shape, std)


def init_random(config: ModelConfig, seed: int, role: str = DE) -> EncoderWeights:
    rng = np.random.default_rng(seed)
    tensors = {
        name: init_tensor(name, shape, rng, config.init_std)
        for name, shape in tensor_shapes(config, role).items()
    }
    return EncoderWeights(config, role, tensors)


# -- forward / backward -----------------------------------------------------


def _as_batch(inputs: Encoding | Batch) -> tuple[Batch, bool]:
    if isinstance(inputs, Encoding):
        return Batch(inputs.ids[None], inputs.segment_ids[None], inputs.attention_mask[None], inputs.pool_mask[None]), True
    return inputs, False


def _check_inputs(weights: EncoderWeights, batch: Batch) -> None:
    cfg = weights.config
    if batch.ids.shape[1] > cfg.max_positions:
        raise ValueError(f"sequence length {batch.ids.shape[1]} exceeds max_positions {cfg.max_positions}")
    if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of vocab range [0, {cfg.vocab_size})")


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _embed(W: dict, batch: Batch, eps: float, want_cache: bool):
    t = batch.ids.shape[1]
    e = W["embeddings.word"][batch.ids] + W["embeddings.position"][:t] + W["embeddings.segment"][batch.segment_ids]
    return nk.layer_norm(e, W["embeddings.ln.gamma"], W["embeddings.ln.beta"], eps, return_cache=want_cache)


def _layer(W: dict, i: int, x: np.ndarray, mask: np.ndarray, heads: int, eps: float, want_cache: bool):
    p = lambda part: W[layer_key(i, part)]
    q = x @ p("attn.q.w") + p("attn.q.b")
    k = x @ p("attn.k.w") + p("attn.k.b")
    v = x @ p("attn.v.w") + p("attn.v.b")
    ctx, att_cache = nk.attention(
        _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads), mask, return_cache=True
    )
    ctx = _merge_heads(ctx)
    a = ctx @ p("attn.o.w") + p("attn.o.b")
    h1, ln1 = nk.layer_norm(x + a, p("attn.ln.gamma"), p("attn.ln.beta"), eps, return_cache=True)
    pre = h1 @ p("ffn.in.w") + p("ffn.in.b")
    act = nk.gelu(pre)
    f = act @ p("ffn.out.w") + p("ffn.out.b")
    h2, ln2 = nk.layer_norm(h1 + f, p("ffn.ln.gamma"), p("ffn.ln.beta"), eps, return_cache=True)
    if not want_cache:
        return h2, None
    return h2, (x, att_cache, ctx, ln1, h1, pre, act, ln2)


def forward(
    weights: EncoderWeights,
    inputs: Encoding | Batch,
    capture: bool = True,
    upto: int | None = None,
    return_cache: bool = False,
):
    """Run the encoder stack.

    With ``capture`` the result is the HiddenStates list of length L+1:
    index 0 is the embedding-layer output (after layer norm) and index i the
    output of encoder layer i-1. Without ``capture`` only the final layer is
    returned, as a one-element list. ``upto`` stops after that many layers.
    A single :class:`Encoding` yields 2-D ``(T, d)`` matrices.
    """
    batch, single = _as_batch(inputs)
    _check_inputs(weights, batch)
    cfg, W = weights.config, weights.tensors
    n_layers = cfg.num_layers if upto is None else upto
    mask = nk.additive_mask(batch.attention_mask, weights.dtype)[:, None, None, :]
    h, emb_cache = _embed(W, batch, cfg.layer_norm_eps, True)
    hidden = [h]
    caches = []
    for i in range(n_layers):
        h, c = _layer(W, i, h, mask, cfg.heads, cfg.layer_norm_eps, return_cache)
        caches.append(c)
        if capture or i == n_layers - 1:
            hidden.append(h)
    if not capture:
        hidden = hidden[-1:]
    if single:
        hidden = [x[0] for x in hidden]
    if return_cache:
        return hidden, (batch, emb_cache, caches)
    return hidden


def backward(weights: EncoderWeights, cache, d_final: np.ndarray, fault: str | None = None) -> dict[str, np.ndarray]:
    """Gradients of every encoder tensor given dL/d(final hidden layer).

    ``fault="negate_ffn"`` deliberately negates the FFN weight gradients; it
    exists only to prove that the gradient checker catches a broken backward.
    """
    batch, emb_cache, caches = cache
    cfg, W = weights.config, weights.tensors
    heads = cfg.heads
    grads: dict[str, np.ndarray] = {}
    dx = d_final
    for i in reversed(range(len(caches))):
        x, att_cache, ctx, ln1, h1, pre, act, ln2 = caches[i]
        g = lambda part, val: grads.__setitem__(layer_key(i, part), val)
        p = lambda part: W[layer_key(i, part)]
        d = x.shape[-1]

        dsum2, dg2, db2 = nk.layer_norm_backward(ln2, dx)
        g("ffn.ln.gamma", dg2)
        g("ffn.ln.beta", db2)
        g("ffn.out.w", act.reshape(-1, act.shape[-1]).T @ dsum2.reshape(-1, d))
        g("ffn.out.b", dsum2.sum(axis=(0, 1)))
        dpre = nk.gelu_backward(pre, dsum2 @ p("ffn.out.w").T)
        g("ffn.in.w", h1.reshape(-1, d).T @ dpre.reshape(-1, dpre.shape[-1]))
        g("ffn.in.b", dpre.sum(axis=(0, 1)))
        if fault == "negate_ffn":
            for part in ("ffn.in.w", "ffn.out.w"):
                grads[layer_key(i, part)] = -grads[layer_key(i, part)]
        dh1 = dsum2 + dpre @ p("ffn.in.w").T

        dsum1, dg1, db1 = nk.layer_norm_backward(ln1, dh1)
        g("attn.ln.gamma", dg1)
        g("attn.ln.beta", db1)
        g("attn.o.w", ctx.reshape(-1, d).T @ dsum1.reshape(-1, d))
        g("attn.o.b", dsum1.sum(axis=(0, 1)))
        dctx = _split_heads(dsum1 @ p("attn.o.w").T, heads)
        dq, dk, dv = (_merge_heads(t) for t in nk.attention_backward(att_cache, dctx))
        xf = x.reshape(-1, d)
        dx = dsum1.copy()
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            g(f"attn.{name}.w", xf.T @ dt.reshape(-1, d))
            g(f"attn.{name}.b", dt.sum(axis=(0, 1)))
            dx += dt @ p(f"attn.{name}.w").T

    de, dge, dbe = nk.layer_norm_backward(emb_cache, dx)
    grads["embeddings.ln.gamma"] = dge
    grads["embeddings.ln.beta"] = dbe
    d = de.shape[-1]
    t = batch.ids.shape[1]
    dword = np.zeros_like(W["embeddings.word"])
    np.add.at(dword, batch.ids.reshape(-1), de.reshape(-1, d))
    grads["embeddings.word"] = dword
    dpos = np.zeros_like(W["embeddings.position"])
    dpos[:t] = de.sum(axis=0)
    grads["embeddings.position"] = dpos
    dseg = np.zeros_like(W["embeddings.segment"])
    np.add.at(dseg, batch.segment_ids.reshape(-1), de.reshape(-1, d))
    grads["embeddings.segment"] = dseg
    # layers past `upto` were never run; their gradient is zero
    for i in range(len(caches), cfg.num_layers):
        for part in LAYER_PARTS:
            grads[layer_key(i, part)] = np.zeros_like(W[layer_key(i, part)])
    return grads


# -- pooling and heads ------------------------------------------------------


def pool_mean(hidden: np.ndarray, pool_mask: np.ndarray | Encoding) -> np.ndarray:
    """Mean over positions flagged in ``pool_mask`` (batched or single)."""
    if isinstance(pool_mask, Encoding):
        pool_mask = pool_mask.pool_mask
    if hidden.shape[:-1] != pool_mask.shape:
        raise ValueError(f"hidden rows {hidden.shape[:-1]} do not match mask {pool_mask.shape}")
    m = pool_mask.astype(hidden.dtype)
    count = m.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise ValueError("mean pooling over zero eligible positions")
    return (hidden * m[..., None]).sum(axis=-2) / count


def pool_mean_backward(pool_mask: np.ndarray, dpooled: np.ndarray, dtype) -> np.ndarray:
    m = pool_mask.astype(dtype)
    return dpooled[:, None, :] * (m / m.sum(axis=-1, keepdims=True))[..., None]


def ce_head(weights: EncoderWeights, final: np.ndarray, return_cache: bool = False):
    """logit = w · tanh(Wp h_CLS + bp) + b_w for every row of a batch."""
    if not weights.has_head:
        raise ConfigError("weights have no cross-encoder head")
    W = weights.tensors
    h_cls = final[:, 0, :]
    t = np.tanh(h_cls @ W["head.pooler.w"] + W["head.pooler.b"])
    logit = t @ W["head.classifier.w"] + W["head.classifier.b"][0]
    if return_cache:
        return logit, (h_cls, t, final.shape)
    return logit


def ce_head_backward(weights: EncoderWeights, cache, dlogit: np.ndarray):
    W = weights.tensors
    h_cls, t, shape = cache
    grads = {
        "head.classifier.w": t.T @ dlogit,
        "head.classifier.b": np.array([dlogit.sum()], dtype=t.dtype),
    }
    dz = np.outer(dlogit, W["head.classifier.w"]) * (1.0 - t * t)
    grads["head.pooler.w"] = h_cls.T @ dz
    grads["head.pooler.b"] = dz.sum(axis=0)
    d_final = np.zeros(shape, dtype=t.dtype)
    d_final[:, 0, :] = dz @ W["head.pooler.w"].T
    return grads, d_final


# -- sentence-level API -----------------------------------------------------


def _encode(vocab: Vocab, text: str, mode: str, max_len: int) -> Encoding:
    if mode == DE:
        return encode_single(text, vocab, max_len)
    if mode == CE:
        return encode_pair(text, None, vocab, max_len, self_pair=True)
    raise ValueError(f"unknown embedding mode {mode!r}")


def _check_layer(weights: EncoderWeights, layer: int) -> None:
    if not 0 <= layer <= weights.config.num_layers:
        raise IndexError(f"layer {layer} out of range [0, {weights.config.num_layers}]")


def embed_sentence_de(weights: EncoderWeights, vocab: Vocab, text: str, layer: int | None = None, max_len: int = 64) -> np.ndarray:
    layer = weights.config.num_layers if layer is None else layer
    _check_layer(weights, layer)
    enc = _encode(vocab, text, DE, max_len)
    return pool_mean(forward(weights, enc, upto=layer)[layer], enc)


def embed_sentence_ce(weights: EncoderWeights, vocab: Vocab, text: str, layer: int | None = None, max_len: int = 64) -> np.ndarray:
    layer = weights.config.num_layers if layer is None else layer
    _check_layer(weights, layer)
    enc = _encode(vocab, text, CE, max_len)
    return pool_mean(forward(weights, enc, upto=layer)[layer], enc)


def _length_batches(encodings: Sequence[Encoding], batch_size: int) -> Iterable[np.ndarray]:
    order = np.argsort([e.num_real for e in encodings], kind="stable")
    for s in range(0, len(order), batch_size):
        yield order[s : s + batch_size]


def embed_texts(
    weights: EncoderWeights,
    vocab: Vocab,
    texts: Sequence[str],
    layers: Sequence[int] | None = None,
    mode: str = DE,
    max_len: int = 64,
    batch_size: int = 128,
) -> np.ndarray:
    """Mean-pooled embeddings of many texts, shape ``(len(layers), N, d)``.

    ``mode`` is DE (single encoding) or CE (self-paired). Texts are grouped
    by length so batches carry little padding; output order matches input.
    """
    layers = [weights.config.num_layers] if layers is None else list(layers)
    for layer in layers:
        _check_layer(weights, layer)
    encs = [_encode(vocab, t, mode, max_len) for t in texts]
    out = np.zeros((len(layers), len(texts), weights.config.hidden), dtype=weights.dtype)
    for idx in _length_batches(encs, batch_size):
        batch = stack([encs[i] for i in idx])
        hidden = forward(weights, batch, upto=max(layers))
        for j, layer in enumerate(layers):
            out[j, idx] = pool_mean(hidden[layer], batch.pool_mask)
    return out


def ce_score_batch(weights: EncoderWeights, vocab: Vocab, pairs: Sequence[tuple[str, str]], max_len: int = 64, batch_size: int = 128) -> np.ndarray:
    if not weights.has_head:
        raise ConfigError("weights have no cross-encoder head")
    encs = [encode_pair(q, d, vocab, max_len) for q, d in pairs]
    out = np.zeros(len(pairs), dtype=weights.dtype)
    for idx in _length_batches(encs, batch_size):
        batch = stack([encs[i] for i in idx])
        final = forward(weights, batch, capture=False)[0]
        out[idx] = ce_head(weights, final)
    return out


def ce_score(weights: EncoderWeights, vocab: Vocab, query: str, doc: str, max_len: int = 64) -> float:
    return float(ce_score_batch(weights, vocab, [(query, doc)], max_len)[0])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / math.sqrt(float(a @ a) * float(b @ b)))
