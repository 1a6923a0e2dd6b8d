"""Versioned binary parameter checkpoints.

Layout (all integers little-endian)::

    b"GPRT"                 magic
    u16                     format version
    u32 + bytes             metadata, UTF-8 ``key=value`` lines
    u32                     tensor count
    per tensor:
        u16 + bytes         UTF-8 name (``encoder.conv1.weight``, ``osb.head.bias``, ...)
        u8                  ndim
        u32 * ndim          dims
        f64 * prod(dims)    values, little-endian
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GPRT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    meta = "".join(f"{k}={v}\n" for k, v in (metadata or {}).items()).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if blob[:4] != MAGIC:
        raise CheckpointFormatError("bad magic; not a GPRT checkpoint")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"checkpoint version {version}, expected {VERSION}")
    pos = 6
    (mlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta_txt = blob[pos:pos + mlen].decode("utf-8")
    pos += mlen
    meta = dict(line.split("=", 1) for line in meta_txt.splitlines() if line)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims)
            pos += 8 * n
            tensors[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from exc
    return tensors, meta


def save(path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(tensors, metadata))
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_bytes())
