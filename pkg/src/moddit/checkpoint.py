"""Self-describing binary checkpoint container.

Layout (all integers little-endian):
  magic  b"MODC", u32 format version
  u32 meta count, then per entry: u32 key length, key utf-8,
                                  u32 value length, value utf-8
  u32 tensor count, then per tensor: u32 name length, name utf-8,
      u8 dtype code, u8 ndim, u64 per dim, u64 payload byte count, payload
Meta entries and tensors are written sorted by key/name, so saving a loaded
checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

MAGIC = b"MODC"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u8")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)        # str -> str
    tensors: dict = field(default_factory=dict)     # str -> np.ndarray

    def require(self, key: str) -> str:
        if key not in self.meta:
            raise ValidationError(f"checkpoint missing meta key {key!r}")
        return self.meta[key]


def _norm(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr)
    le = a.dtype.newbyteorder("<")
    if le not in _CODES:
        raise ValidationError(f"unsupported tensor dtype {a.dtype}")
    # tobytes() serializes in C order on its own, so only the dtype needs fixing
    return a.astype(le, copy=False)


def save_checkpoint(path: str, ckpt: Checkpoint):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = sorted(ckpt.meta.items())
    parts.append(struct.pack("<I", len(meta)))
    for k, v in meta:
        kb, vb = k.encode(), str(v).encode()
        parts.append(struct.pack("<I", len(kb)) + kb)
        parts.append(struct.pack("<I", len(vb)) + vb)
    tensors = sorted(ckpt.tensors.items())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        a = _norm(arr)
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BB", _CODES[a.dtype.newbyteorder("<")], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
        payload = a.tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    blob = b"".join(parts)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.at = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.blob):
            raise ValidationError(
                f"{self.path}: truncated checkpoint (wanted {n} bytes at {self.at}, "
                f"file has {len(self.blob)})")
        out = self.blob[self.at:self.at + n]
        self.at += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise ValidationError(f"cannot read checkpoint: {e}") from None
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ValidationError(f"{path}: format version {version}, expected {VERSION}")
    ckpt = Checkpoint()
    for _ in range(r.u32()):
        k = r.take(r.u32()).decode()
        v = r.take(r.u32()).decode()
        if k in ckpt.meta:
            raise ValidationError(f"{path}: duplicate meta key {k!r}")
        ckpt.meta[k] = v
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        code, ndim = struct.unpack("<BB", r.take(2))
        if code not in _DTYPES:
            raise ValidationError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = tuple(r.u64() for _ in range(ndim))
        nbytes = r.u64()
        want = _DTYPES[code].itemsize * int(np.prod(shape, dtype=np.int64))
        if nbytes != want:
            raise ValidationError(
                f"{path}: tensor {name!r} payload is {nbytes} bytes, shape {shape} needs {want}")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code]).reshape(shape).copy()
        if name in ckpt.tensors:
            raise ValidationError(f"{path}: duplicate tensor {name!r}")
        ckpt.tensors[name] = arr
    if r.at != len(blob):
        raise ValidationError(f"{path}: {len(blob) - r.at} trailing bytes after checkpoint")
    return ckpt
