"""Flat binary checkpoint: manifest, little-endian float32 payload, CRC32 trailer.

Layout::

    b"SQTK1"
    u32 count
    count x (u32 name_len, name bytes (utf-8), u32 rank, rank x u32 dim, u64 offset)
    payload (float32 little-endian, tensors back to back in manifest order)
    u32 crc32(payload)

Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import struct
import zlib
from typing import Mapping

import numpy as np

MAGIC = b"SQTK1"


class CheckpointError(ValueError):
    pass


def save_tensors(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    header = [MAGIC, struct.pack("<I", len(tensors))]
    chunks, offset = [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)) + raw)
        header.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<Q", offset))
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(b"".join(header))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:5]!r}")
    try:
        (count,) = struct.unpack_from("<I", blob, 5)
        pos = 9
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            (off,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            manifest.append((name, dims, off))
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt manifest ({e})") from None
    payload = blob[pos:-4]
    if len(blob) < pos + 4:
        raise CheckpointError(f"{path}: missing CRC trailer")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, refusing to load")
    out, expected = {}, 0
    for name, dims, off in manifest:
        n = int(np.prod(dims, dtype=np.int64)) * 4
        if off != expected or off + n > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} has inconsistent offset {off}")
        out[name] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=off).reshape(dims).astype(np.float32)
        expected = off + n
    if expected != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - expected} trailing payload bytes")
    return out
