"""Parameter checkpoint files.

Layout (little-endian)::

    b"BEVP"  u32 version  u32 meta_len  meta (utf-8 JSON)  u32 count
    count x [ u16 name_len  name  u32 ndim  ndim x u32 dims  f32 data ]
    sha256 of everything above (32 bytes)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BEVP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: dict, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(getattr(arr, "data", arr))
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, params: dict, meta: dict | None = None) -> str:
    """Write the file and return its sha256 hex digest."""
    buf = encode_checkpoint(params, meta)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path):
    """Return ``(params, meta)`` with ``params`` an ordered name -> float32 array dict."""
    buf = Path(path).read_bytes()
    if len(buf) < 48 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, meta_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(body[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    return params, meta


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
