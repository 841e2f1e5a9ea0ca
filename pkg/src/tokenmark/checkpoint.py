"""Named-tensor checkpoint archive.

Layout (little-endian)::

    b"OMTM" | u32 version (1) | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype (0 = float64) | u8 rank | u32 dims[rank] | payload
    u32 metadata length | UTF-8 JSON {"config": {...}, "step": int, "with_marks": bool, "with_head": bool}
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ParseError, ValidationError
from .model import OmniModel

MAGIC = b"OMTM"
VERSION = 1
F64 = 0


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8", order="C")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    doc = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(doc)) + doc)
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ParseError("not a checkpoint archive (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        for i in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            dtype, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            if dtype != F64:
                raise ParseError(f"tensor {name!r} has unknown dtype code {dtype}", i)
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + size > len(data):
                raise ParseError(f"tensor {name!r} is truncated", i)
            tensors[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
        (n,) = struct.unpack_from("<I", data, pos)
        meta = json.loads(data[pos + 4:pos + 4 + n].decode("utf-8"))
        if pos + 4 + n != len(data):
            raise ParseError("trailing bytes after metadata")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from None
    return tensors, meta


def save_checkpoint(path, model: OmniModel, step: int = 0) -> None:
    meta = {"config": model.config.to_dict(), "step": step,
            "with_marks": model.bank is not None, "with_head": model.head is not None}
    write_tensors(path, {k: v.data for k, v in model.parameters().items()}, meta)


def load_checkpoint(path) -> tuple[OmniModel, int]:
    tensors, meta = read_tensors(path)
    config = RunConfig.from_dict(meta["config"])
    model = OmniModel(config, with_marks=meta.get("with_marks", True), with_head=meta.get("with_head", True))
    params = model.parameters()
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise ValidationError(f"checkpoint tensors do not match the model: {missing[:5]}")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise ValidationError(f"{name}: shape {tensors[name].shape} != {p.data.shape}")
        p.data[...] = tensors[name]
    return model, int(meta.get("step", 0))
