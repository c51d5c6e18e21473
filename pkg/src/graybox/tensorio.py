"""Named-tensor container files.

Layout (all integers little-endian uint32)::

    magic b"GBTC" | version | tensor count | metadata length | metadata (UTF-8 JSON)
    per tensor: name length | name (UTF-8) | rank | dims... | float64 LE values

Tensors are written in sorted name order so equal contents give equal bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GBTC"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, len(tensors), len(meta_bytes)))
    buf.write(meta_bytes)
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != MAGIC:
        raise ContainerError("not a tensor container")
    version, count, mlen = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 16
    meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims)
        pos += 8 * n
        out[name] = arr.astype(np.float64)
    return out, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a container and return its sha256 hex digest."""
    data = dumps(tensors, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
