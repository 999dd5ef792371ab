"""Versioned binary checkpoint.

Layout (all integers little-endian)::

    magic        8 bytes   b"EGRUCKPT"
    version      u32
    header_len   u64
    header       header_len bytes of UTF-8 JSON (sorted keys)
    payload      float32 LE tensors (row-major), then masks as packed bits
                 (little bit order, one bit per weight)

The header holds the model config, a directory of tensors and masks with
shapes and payload offsets, the vocabulary hash, the optimizer step and free
``extra`` metadata. Saving the same content twice gives identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .egru import CELLS
from .lm import LmConfig, LmModel
from .train import OptimState

MAGIC = b"EGRUCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: LmModel
    opt: OptimState | None = None
    vocab_hash: str = ""
    train_step: int = 0
    extra: dict = field(default_factory=dict)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    model = ck.model
    tensors = dict(model.named_tensors())
    masks = model.masks or {}
    for name, m in masks.items():
        if np.any(tensors[name][~m] != 0):
            raise CheckpointError(f"{name} has nonzero weights at pruned positions")
    if ck.opt is not None:
        for name in model.named_tensors():
            if name in ck.opt.m:
                tensors[f"opt.m.{name}"] = ck.opt.m[name]
                tensors[f"opt.v.{name}"] = ck.opt.v[name]
    chunks, t_dir, m_dir = [], [], []
    offset = 0
    for name, t in tensors.items():
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        t_dir.append({"name": name, "shape": list(t.shape), "dtype": "f32le",
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    for name, m in masks.items():
        raw = np.packbits(m.astype(bool).ravel(), bitorder="little").tobytes()
        m_dir.append({"name": name, "shape": list(m.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": model.config.to_dict(),
        "tensors": t_dir,
        "masks": m_dir,
        "vocab_hash": ck.vocab_hash,
        "train_step": int(ck.train_step),
        "optimizer_step": None if ck.opt is None else int(ck.opt.step),
        "payload_bytes": offset,
        "extra": ck.extra,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(chunks)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CorruptCheckpointError("file too short for checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise CorruptCheckpointError("header extends past end of file")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from None
    payload = memoryview(buf)[start:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpointError(
            f"payload is {len(payload)} bytes, header declares {header['payload_bytes']}")

    def read(entry, dtype):
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise CorruptCheckpointError(f"{entry['name']} runs past end of payload")
        return np.frombuffer(payload[lo:lo + n], dtype=dtype)

    arrays = {e["name"]: read(e, "<f4").astype(np.float32).reshape(e["shape"])
              for e in header["tensors"]}
    masks = {}
    for e in header["masks"]:
        size = int(np.prod(e["shape"]))
        bits = np.unpackbits(read(e, np.uint8), bitorder="little", count=size)
        masks[e["name"]] = bits.astype(bool).reshape(e["shape"])

    cfg = LmConfig(**header["model_config"])
    params_cls = CELLS[cfg.cell][0]

    def take(name):
        if name not in arrays:
            raise CorruptCheckpointError(f"missing tensor {name}")
        return arrays[name].copy()

    layers = [params_cls(**{f.name: take(f"layers.{k}.{f.name}") for f in fields(params_cls)})
              for k in range(cfg.n_layers)]
    model = LmModel(cfg, take("embedding"), layers, masks or None)
    opt = None
    if header["optimizer_step"] is not None:
        opt = OptimState(step=header["optimizer_step"])
        for name in model.named_tensors():
            if f"opt.m.{name}" in arrays:
                opt.m[name] = arrays[f"opt.m.{name}"].copy()
                opt.v[name] = arrays[f"opt.v.{name}"].copy()
    return Checkpoint(model, opt, header["vocab_hash"], header["train_step"], header["extra"])


def save_checkpoint(ck: Checkpoint, path):
    data = encode_checkpoint(ck)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
