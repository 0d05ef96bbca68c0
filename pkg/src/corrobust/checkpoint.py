"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        4 bytes  b"RLAT"
    version      uint32
    header_len   uint32
    header       UTF-8 JSON: {"spec", "method", "seed", "epoch", "meta"}
    count        uint32
    count x tensor:
        name_len uint16, name UTF-8
        dtype    uint8   (1 = float32)
        ndim     uint8
        dims     ndim x uint32
        data     prod(dims) x float32 little-endian, C order

Parameters and batchnorm running statistics are both stored as tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .model import ModelGraph, ModelSpec, build_model

MAGIC = b"RLAT"
FORMAT_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4")}


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class CheckpointMeta:
    method: str = "standard"
    seed: int = 0
    epoch: int = 0
    extra: dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(model: ModelGraph, meta: CheckpointMeta) -> bytes:
    if model.spec is None:
        raise CheckpointError("model has no spec; only spec-built models can be saved")
    header = json.dumps(
        {"spec": model.spec.to_dict(), "method": meta.method, "seed": int(meta.seed), "epoch": int(meta.epoch),
         "meta": meta.extra},
        sort_keys=True,
    ).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", 1, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> tuple[ModelGraph, CheckpointMeta]:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (hlen,) = r.unpack("<I", "header length")
    try:
        header = json.loads(r.take(hlen, "header").decode())
        spec = ModelSpec.from_dict(header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad header: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode()
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tag, ndim = r.unpack("<BB", f"dtype of {name}")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        dt = DTYPE_TAGS[tag]
        n = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(n * dt.itemsize, f"data of {name}"), dtype=dt).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor")

    model = build_model(spec, seed=0, dtype=np.float32)
    graph = model.graph
    expected = set(graph.params) | set(graph.buffers)
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise CheckpointError(f"tensor names do not match the spec (missing {missing}, unexpected {extra})")
    for name, arr in tensors.items():
        store = graph.params if name in graph.params else graph.buffers
        if store[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, spec needs {store[name].shape}")
        store[name] = arr.astype(np.float32)
    meta = CheckpointMeta(header.get("method", ""), int(header.get("seed", 0)), int(header.get("epoch", 0)),
                          header.get("meta", {}))
    return model, meta


def save_checkpoint(model: ModelGraph, meta: CheckpointMeta, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(model, meta))


def load_checkpoint(path: str | Path) -> tuple[ModelGraph, CheckpointMeta]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"{p}: no such file")
    return decode_checkpoint(p.read_bytes())
