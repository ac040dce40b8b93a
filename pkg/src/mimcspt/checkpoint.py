"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic "MIMCSPT\\0"
    u32       format version (currently 1)
    u32 + n   UTF-8 JSON metadata (config echo, provenance chain, schedule
              step, RNG state, stage info)
    u32       tensor count
    per tensor:
        u16 + n  UTF-8 name
        u8       dtype tag (0 = float32, 1 = float64, 2 = int64)
        u8       ndim, then u32 per extent
        raw      row-major little-endian payload
    u32       CRC32 of every preceding byte

Tensors are written in sorted name order and the metadata JSON uses sorted
keys, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"MIMCSPT\x00"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """Malformed, truncated, or corrupt checkpoint file."""


@dataclass
class Checkpoint:
    """In-memory view of a checkpoint: named arrays plus JSON metadata."""

    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def provenance(self) -> list[str]:
        return list(self.meta.get("provenance", []))

    def model_params(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Model tensors (encoder/decoder/head prefixes) as trainable leaves."""
        return {k: Tensor(v.copy(), requires_grad=requires_grad, dtype=v.dtype)
                for k, v in self.tensors.items()
                if k.startswith(("encoder.", "decoder.", "head."))}

    def optimizer_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("optim.")}

    def has_prefix(self, prefix: str) -> bool:
        return any(k.startswith(prefix) for k in self.tensors)


def save_checkpoint(path, tensors: dict[str, np.ndarray | Tensor], meta: dict) -> None:
    """Write a checkpoint; see module docstring for the byte layout."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    names = sorted(tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = tensors[name]
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        name_bytes = name.encode()
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated checkpoint")
    payload, crc_bytes = blob[:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupt")
    r = io.BytesIO(payload)
    if r.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", r.read(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack("<I", r.read(4))
    meta = json.loads(r.read(meta_len).decode())
    (count,) = struct.unpack("<I", r.read(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.read(2))
        name = r.read(name_len).decode()
        tag, ndim = struct.unpack("<BB", r.read(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f"<{ndim}I", r.read(4 * ndim)) if ndim else ()
        dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        raw = r.read(n_bytes)
        if len(raw) != n_bytes:
            raise CheckpointError(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    return Checkpoint(tensors=tensors, meta=meta)
