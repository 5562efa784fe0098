"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"SANETCK\\0"
    version    u32
    config     u32 length + UTF-8 text (resolved key = value lines)
    step       u64
    count      u32
    entries    count x { u16 name length, UTF-8 name, u8 ndim, ndim x u32, float64 LE values }

Optimizer moments are stored as ordinary entries under ``opt.m/`` and
``opt.v/`` prefixes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import atomic_write

MAGIC = b"SANETCK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    tensors: dict[str, np.ndarray]
    step: int = 0

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}

    def moments(self) -> tuple[dict, dict]:
        m = {k[len("opt.m/"):]: v for k, v in self.tensors.items() if k.startswith("opt.m/")}
        v = {k[len("opt.v/"):]: v for k, v in self.tensors.items() if k.startswith("opt.v/")}
        return m, v


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = ckpt.config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", ckpt.step))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config_text = bytes(take(cfg_len)).decode("utf-8")
    (step,) = struct.unpack("<Q", take(8))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = arr
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint entries")
    return Checkpoint(config_text, tensors, step)


def save(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
