"""NTC1 tensor container and cross-encoder -> dual-encoder weight surgery.

File layout (all little-endian)::

    b"NTC1" | uint32 header length | UTF-8 JSON header | raw tensor blobs

The header lists every tensor's name, dtype, shape, byte offset (relative
to the start of the blob section) and byte count, plus ``data_bytes``.
Architecture, role and vocab path live in a ``<path>.cfg`` sidecar with one
``key=value`` per line; lines starting with ``#`` are comments.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import (
    DE, LAYER_PARTS, ConfigError, EncoderWeights, ModelConfig, forward, init_random, layer_key,
)
from .tokenizer import Vocab, encode_pair, encode_single

MAGIC = b"NTC1"
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class CheckpointFormatError(ValueError):
    pass


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".cfg")


def write_sidecar(path: str | Path, config: ModelConfig, role: str, vocab_path: str = "", meta: dict | None = None) -> None:
    meta = dict(meta or {})
    lines = [f"# {meta.pop('header')}"] if "header" in meta else []
    lines += [f"# {k}={v}" for k, v in sorted(meta.items())]
    lines.append(f"role={role}")
    lines.append(f"vocab_path={vocab_path}")
    lines += [f"{k}={v}" for k, v in config.to_dict().items()]
    sidecar_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path: str | Path) -> tuple[ModelConfig, str, str]:
    kv = {}
    for line in sidecar_path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    role = kv.pop("role", DE)
    vocab_path = kv.pop("vocab_path", "")
    return ModelConfig.from_dict(kv), role, vocab_path


def save(weights: EncoderWeights, path: str | Path, vocab_path: str = "", meta: dict | None = None) -> None:
    """Write the tensor file plus its ``.cfg`` sidecar. ``meta`` goes into both headers."""
    entries, blobs, offset = [], [], 0
    for name in sorted(weights.tensors):
        arr = np.ascontiguousarray(weights.tensors[name])
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _DTYPES:
            raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"role": weights.role, "tensors": entries, "data_bytes": offset, "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    write_sidecar(path, weights.config, weights.role, vocab_path, meta)


def load(path: str | Path) -> tuple[EncoderWeights, ModelConfig]:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header") from exc
    body = data[8 + hlen :]
    if len(body) != header["data_bytes"]:
        raise CheckpointFormatError(f"{path}: expected {header['data_bytes']} data bytes, found {len(body)}")
    tensors, end = {}, 0
    for e in sorted(header["tensors"], key=lambda e: e["offset"]):
        if e["offset"] < end:
            raise CheckpointFormatError(f"{path}: overlapping tensor {e['name']}")
        if e["name"] in tensors:
            raise CheckpointFormatError(f"{path}: duplicate tensor {e['name']}")
        end = e["offset"] + e["nbytes"]
        dt = _DTYPES[e["dtype"]]
        arr = np.frombuffer(body[e["offset"] : end], dtype=e["dtype"]).astype(dt)
        tensors[e["name"]] = arr.reshape(e["shape"])
    config, role, _ = read_sidecar(path)
    if role != header["role"]:
        raise ConfigError(f"{path}: role {header['role']} in file, {role} in sidecar")
    weights = EncoderWeights(config, role, tensors)
    weights.validate()
    return weights, config


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- surgery ----------------------------------------------------------------


def infuse(ce_weights: EncoderWeights, de_num_layers: int, k_copy: int, seed: int) -> EncoderWeights:
    """Build a ``de_num_layers`` dual encoder from a cross encoder.

    Embedding tables and embedding layer norm are copied, as are encoder
    layers ``0..k_copy-1``; the remaining layers come from :func:`init_random`
    with ``seed``. The classification head is dropped. ``(2, 1)`` is DE-2 CE.
    """
    ce_cfg = ce_weights.config
    if k_copy > de_num_layers:
        raise ValueError(f"k_copy={k_copy} exceeds de_num_layers={de_num_layers}")
    if k_copy > ce_cfg.num_layers:
        raise ValueError(f"k_copy={k_copy} exceeds the cross encoder's {ce_cfg.num_layers} layers")
    if k_copy < 0:
        raise ValueError("k_copy must be >= 0")
    de = init_random(ce_cfg.replace(num_layers=de_num_layers), seed, DE)
    for name, arr in ce_weights.tensors.items():
        if name.startswith("embeddings."):
            de.tensors[name] = arr.copy()
    for i in range(k_copy):
        for part in LAYER_PARTS:
            de.tensors[layer_key(i, part)] = ce_weights.tensors[layer_key(i, part)].copy()
    de.validate()
    return de


@dataclass
class InfusionReport:
    k_copy: int
    tolerance: float
    max_deviation: list[float] = field(default_factory=list)

    @property
    def flagged_layers(self) -> list[int]:
        return [i for i, dev in enumerate(self.max_deviation) if dev >= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.flagged_layers

    def __str__(self) -> str:
        rows = [f"  hidden[{i}] max|Δ|={dev:.3e}{'  FLAG' if dev >= self.tolerance else ''}" for i, dev in enumerate(self.max_deviation)]
        return f"infusion check (k_copy={self.k_copy}, tol={self.tolerance:g}):\n" + "\n".join(rows)


def verify_infusion(
    ce_weights: EncoderWeights,
    de_weights: EncoderWeights,
    k_copy: int,
    vocab: Vocab,
    probes: Sequence[str],
    max_len: int = 64,
    tolerance: float = 1e-6,
) -> InfusionReport:
    """Compare hidden states 0..k_copy of both stacks on identical encodings.

    Each probe is fed both as a single encoding and as a self-pair.
    """
    report = InfusionReport(k_copy, tolerance, [0.0] * (k_copy + 1))
    for text in probes:
        for enc in (encode_single(text, vocab, max_len), encode_pair(text, None, vocab, max_len, self_pair=True)):
            a = forward(ce_weights, enc, upto=k_copy)
            b = forward(de_weights, enc, upto=k_copy)
            for i in range(k_copy + 1):
                real = enc.attention_mask.astype(bool)
                dev = float(np.max(np.abs(a[i][real] - b[i][real])))
                report.max_deviation[i] = max(report.max_deviation[i], dev)
    return report
