"""Flat parameter checkpoint files.

Layout (little-endian)::

    b"GTEMCKPT" | version u8 | count u32
    repeated, sorted by name:
        name_len u16 | name utf-8 | ndim u8 | dims u32 * ndim | float64 * prod(dims)
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GTEMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        version, count = struct.unpack_from("<BI", blob, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 13
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(blob):
                raise CheckpointError("truncated checkpoint")
            out[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint records")
    return out


def save(path: str | Path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def state_hash(state: dict[str, np.ndarray]) -> int:
    """64-bit model hash stored in bitstream headers."""
    return int.from_bytes(hashlib.sha256(dumps(state)).digest()[:8], "little")
