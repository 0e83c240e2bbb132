"""MNRL training for dual encoders and binary training for the toy cross encoder."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .bm25 import TrainExample
from .model import (
    CE, DE, EncoderWeights, ModelConfig, backward, ce_head, ce_head_backward, forward, init_random,
    pool_mean, pool_mean_backward,
)
from .tokenizer import Vocab, encode_pair, encode_single, stack

__all__ = [
    "TrainExample", "TrainConfig", "OptimizerState", "mnrl_loss", "ce_pair_loss", "adamw_step",
    "DE_MNRL", "CE_BINARY", "train", "de_loss_and_grads", "ce_loss_and_grads", "model_grad_check", "write_loss_curve",
]

log = logging.getLogger(__name__)

DE_MNRL, CE_BINARY = "DE-MNRL", "CE-binary"


@dataclass
class TrainConfig:
    batch_size: int = 16
    n_neg: int = 4
    scale: float = 20.0
    lr: float = 2e-4
    warmup: float = 0.1
    epochs: int = 1
    weight_decay: float = 0.01
    seed: int = 0
    max_len: int = 64
    max_steps: int | None = None

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("similarity scale must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses -----------------------------------------------------------------


def _normalize(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise FloatingPointError(f"zero-norm {what} embedding")
    return x / norm, norm


def mnrl_loss(query_embs: np.ndarray, candidate_embs: np.ndarray, scale: float = 20.0):
    """Multiple-negatives ranking loss.

    Candidate ``i`` is the positive for query ``i``; every other candidate
    acts as a negative. Returns ``(loss, d_query, d_candidates)``.
    """
    b = query_embs.shape[0]
    if candidate_embs.shape[0] < b:
        raise ValueError("need at least one candidate per query")
    qn, qnorm = _normalize(query_embs, "query")
    cn, cnorm = _normalize(candidate_embs, "candidate")
    s = scale * (qn @ cn.T)
    smax = s.max(axis=1, keepdims=True)
    lse = smax[:, 0] + np.log(np.exp(s - smax).sum(axis=1))
    idx = np.arange(b)
    loss = float(np.mean(lse - s[idx, idx]))

    ds = nk.softmax_rows(s)
    ds[idx, idx] -= 1.0
    ds /= b
    dqn = scale * ds @ cn
    dcn = scale * ds.T @ qn
    dq = (dqn - qn * (qn * dqn).sum(axis=1, keepdims=True)) / qnorm
    dc = (dcn - cn * (cn * dcn).sum(axis=1, keepdims=True)) / cnorm
    return loss, dq, dc


def ce_pair_loss(logit, label):
    """Binary cross-entropy with logits, mean over the batch. Returns (loss, dlogit)."""
    z = np.asarray(logit, dtype=np.float64 if np.ndim(logit) == 0 else None)
    y = np.asarray(label, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    n = max(z.size, 1)
    dz = (sig - y) / n
    if z.ndim == 0:
        return float(loss), float(dz)
    return float(loss.mean()), dz.astype(z.dtype)


# -- batch gradients --------------------------------------------------------


def _add_grads(acc: dict, new: dict) -> None:
    for k, v in new.items():
        if k in acc:
            acc[k] += v
        else:
            acc[k] = v


def de_loss_and_grads(
    weights: EncoderWeights,
    vocab: Vocab,
    examples: Sequence[TrainExample],
    config: TrainConfig,
    fault: str | None = None,
):
    """MNRL loss on one batch; query and candidate towers share ``weights``."""
    queries = [encode_single(e.query, vocab, config.max_len) for e in examples]
    cands = [encode_single(e.positive, vocab, config.max_len) for e in examples]
    for e in examples:
        cands += [encode_single(n, vocab, config.max_len) for n in e.negatives[: config.n_neg]]
    towers = []
    for encs in (queries, cands):
        batch = stack(encs)
        hidden, cache = forward(weights, batch, capture=False, return_cache=True)
        towers.append((batch, cache, pool_mean(hidden[0], batch.pool_mask)))
    loss, dq, dc = mnrl_loss(towers[0][2], towers[1][2], config.scale)
    grads: dict[str, np.ndarray] = {}
    for (batch, cache, _), demb in zip(towers, (dq, dc)):
        d_final = pool_mean_backward(batch.pool_mask, demb.astype(weights.dtype), weights.dtype)
        _add_grads(grads, backward(weights, cache, d_final, fault))
    return loss, grads


def ce_loss_and_grads(
    weights: EncoderWeights,
    vocab: Vocab,
    pairs: Sequence[tuple[str, str, int]],
    config: TrainConfig,
    fault: str | None = None,
):
    encs = [encode_pair(q, d, vocab, config.max_len) for q, d, _ in pairs]
    labels = np.array([y for _, _, y in pairs], dtype=weights.dtype)
    batch = stack(encs)
    hidden, cache = forward(weights, batch, capture=False, return_cache=True)
    logits, head_cache = ce_head(weights, hidden[0], return_cache=True)
    loss, dlogit = ce_pair_loss(logits, labels)
    grads, d_final = ce_head_backward(weights, head_cache, dlogit)
    grads.update(backward(weights, cache, d_final, fault))
    return loss, grads


# -- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _decays(name: str) -> bool:
    return name.endswith(".w") or name.startswith("embeddings.") and not name.startswith("embeddings.ln")


def adamw_step(
    weights: EncoderWeights,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place AdamW update with bias-corrected moments and decoupled decay."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient at step {state.step} in {bad}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        w = weights.tensors[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != weight shape {w.shape}")
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and _decays(name):
            update += weight_decay * w
        w -= (lr * update).astype(w.dtype)


def lr_at(step: int, total: int, base: float, warmup: float) -> float:
    """Linear warmup over ``warmup * total`` steps, then linear decay to 0."""
    warm = int(math.ceil(warmup * total))
    if step < warm:
        return base * (step + 1) / warm
    return base * max(0.0, (total - step) / max(1, total - warm))


# -- loop -------------------------------------------------------------------


def train(
    weights: EncoderWeights,
    role: str,
    examples: Sequence,
    config: TrainConfig,
    vocab: Vocab,
    state: OptimizerState | None = None,
):
    """Train ``weights`` in place; returns ``(weights, loss_curve)``.

    ``role`` is ``"DE-MNRL"`` (examples are :class:`TrainExample`) or
    ``"CE-binary"`` (examples are ``(query, doc, label)`` triples). The loss
    curve holds one ``(step, loss, lr)`` tuple per optimizer step.
    """
    if not examples:
        raise ValueError("empty training set")
    if config.batch_size > len(examples):
        raise ValueError(f"batch size {config.batch_size} > dataset size {len(examples)}")
    if role == DE_MNRL:
        if config.batch_size < 2 and config.n_neg == 0:
            raise ValueError("MNRL needs batch_size >= 2 without hard negatives")
        step_fn = de_loss_and_grads
    elif role == CE_BINARY:
        if not weights.has_head:
            raise ValueError("CE-binary training needs a cross-encoder head")
        step_fn = ce_loss_and_grads
    else:
        raise ValueError(f"unknown training role {role!r}")

    per_epoch = len(examples) // config.batch_size
    total = config.max_steps or per_epoch * config.epochs
    rng = np.random.default_rng(config.seed)
    state = state or OptimizerState()
    curve: list[tuple[int, float, float]] = []
    step = 0
    while step < total:
        order = rng.permutation(len(examples))
        for s in range(per_epoch):
            if step >= total:
                break
            batch = [examples[i] for i in order[s * config.batch_size : (s + 1) * config.batch_size]]
            loss, grads = step_fn(weights, vocab, batch, config)
            lr = lr_at(step, total, config.lr, config.warmup)
            adamw_step(weights, grads, state, lr, config.weight_decay)
            curve.append((step, loss, lr))
            step += 1
        log.debug("%s step %d loss %.4f", role, step, curve[-1][1])
    return weights, curve


def write_loss_curve(curve, path: str | Path, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in curve:
            w.writerow([step, repr(float(loss)), repr(float(lr))])


# -- end-to-end gradient check ----------------------------------------------


def _tiny_vocab() -> Vocab:
    return Vocab(["[PAD]", "[UNK]", "[CLS]", "[SEP]"] + [f"t{i}" for i in range(12)])


def model_grad_check(
    config: ModelConfig | None = None,
    seed: int = 0,
    path: str = DE_MNRL,
    fault: str | None = None,
    step: float = 1e-5,
    max_len: int = 8,
    floor: float = 1e-6,
) -> float:
    """Max per-tensor relative error of the full-model gradient vs central differences.

    Every entry of every weight tensor is perturbed, in float64. Tensors
    whose analytic and numeric gradient norms are both below ``floor``
    (key biases, for instance, whose true gradient is exactly zero) count
    as agreeing.
    """
    vocab = _tiny_vocab()
    config = config or ModelConfig(num_layers=2, hidden=8, heads=2, ff=16, vocab_size=len(vocab), max_positions=max_len)
    if config.vocab_size != len(vocab):
        config = config.replace(vocab_size=len(vocab))
    if config.hidden > 16 or config.num_layers > 2 or max_len > 8:
        raise ValueError("model_grad_check is meant for tiny configs (d<=16, L<=2, max_len<=8)")
    role = CE if path == CE_BINARY else DE
    # larger init so gradients are well above finite-difference noise
    weights = init_random(config.replace(init_std=0.5), seed, role).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    words = [f"t{i}" for i in range(12)]
    sent = lambda n: " ".join(rng.choice(words, size=n))
    cfg = TrainConfig(batch_size=3, n_neg=1, scale=5.0, max_len=max_len)
    if path == DE_MNRL:
        data = [TrainExample(sent(3), sent(2), [sent(4)]) for _ in range(3)]
        fn = lambda f=None: de_loss_and_grads(weights, vocab, data, cfg, f)
    elif path == CE_BINARY:
        data = [(sent(2), sent(3), y) for y in (1, 0, 1)]
        fn = lambda f=None: ce_loss_and_grads(weights, vocab, data, cfg, f)
    else:
        raise ValueError(f"unknown path {path!r}")
    _, analytic = fn(fault)
    worst = 0.0
    for name, arr in weights.tensors.items():
        numeric = nk.numeric_grad(lambda: fn()[0], arr, step)
        worst = max(worst, nk.relative_error(analytic[name], numeric, floor=floor))
    return worst
