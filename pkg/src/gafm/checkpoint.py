"""Versioned binary container for named float tensors.

Layout (all integers little-endian)::

    b"GAFM1"
    u32 meta_len, meta_len bytes of UTF-8 JSON (sorted keys)
    u32 record_count
    per record:
        u16 name_len, name (UTF-8)
        u8  dtype code (4 = float32, 8 = float64)
        u8  ndim, ndim x u32 extents
        prod(extents) little-endian floats
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .nn import ParamSet
from .tensor import Tensor

__all__ = ["MAGIC", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"GAFM1"
_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    """The checkpoint file is corrupt or incompatible."""


def _encode(params: Mapping[str, Union[np.ndarray, Tensor]], meta: Optional[dict]) -> bytes:
    parts = [MAGIC]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype not in (np.float32, np.float64):
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = arr.dtype.itemsize
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: Mapping[str, Union[np.ndarray, Tensor]], path, meta: Optional[dict] = None) -> None:
    meta = getattr(params, "meta", None) if meta is None else meta
    Path(path).write_bytes(_encode(params, meta))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated file while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> ParamSet:
    """Read a checkpoint; nothing is returned unless the whole file validates."""
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"magic: expected {MAGIC!r}, found {buf[:len(MAGIC)]!r}")
    if len(buf) < len(MAGIC) + 4:
        raise CheckpointError("truncated file while reading checksum")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum: CRC-32 mismatch")
    r = _Reader(body)
    r.take(len(MAGIC), "magic")
    (meta_len,) = r.unpack("<I", "meta length")
    try:
        meta = json.loads(r.take(meta_len, "meta").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"meta: {exc}") from None
    (count,) = r.unpack("<I", "record count")
    out = ParamSet(meta=meta)
    for i in range(count):
        (name_len,) = r.unpack("<H", f"record {i} name length")
        name = r.take(name_len, f"record {i} name").decode()
        code, ndim = r.unpack("<BB", f"{name} header")
        if code not in _CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        dt = _CODES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(n * dt.itemsize, f"{name} data"), dtype=dt).reshape(shape)
        if name in out:
            raise CheckpointError(f"{name}: duplicate record")
        out[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"trailing bytes after {count} records")
    return out
