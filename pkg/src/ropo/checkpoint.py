"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ROPO"                      magic
    u32  version                 currently 1
    u16  0xFEFF                  endianness marker (bytes FF FE on disk)
    u32  metadata length, then UTF-8 JSON metadata
    u32  record count
    per record:
        u32 name length, UTF-8 name
        u32 rank, then rank x u32 dims
        prod(dims) float64 values, row-major, little-endian

Records hold model parameters (``param.<name>``), optimizer moments
(``adam.*``) and anything else the writer adds; the metadata carries the
model configuration and the step counter.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ROPO"
VERSION = 1
_BOM = 0xFEFF

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    parts = [MAGIC, struct.pack("<IH", VERSION, _BOM)]
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8", order="C")
        if arr.ndim > 3:
            raise CheckpointError(f"tensor {name!r} has rank {arr.ndim} > 3")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a ROPO checkpoint")
    version, bom = r.unpack("<IH")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if bom != _BOM:
        raise CheckpointError(f"{path}: unexpected endianness marker {bom:#06x}")
    (meta_len,) = r.unpack("<I")
    metadata = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        if rank > 3:
            raise CheckpointError(f"{path}: tensor {name!r} has rank {rank} > 3")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = arr
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return Checkpoint(tensors, metadata)
