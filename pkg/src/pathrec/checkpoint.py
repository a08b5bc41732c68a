"""Versioned binary checkpoints.

Layout: 4-byte magic, u32 format version, u32 header length, JSON header
(array names + shapes in order, plus a free-form meta dict), concatenated
little-endian f64 blobs, u32 CRC32 over everything before it. Loading
reproduces every array bitwise or fails loudly.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(Exception):
    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


def save_checkpoint(path: str | Path, magic: bytes, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    header = {
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    buf = bytearray()
    buf += magic
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack("<I", len(header_bytes))
    buf += header_bytes
    for v in arrays.values():
        buf += np.ascontiguousarray(v, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != magic:
        raise CheckpointError("incompatible-checkpoint",
                              f"expected magic {magic!r}, got {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError("incompatible-checkpoint", f"format version {version}")
    if len(raw) < 16 or zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError("checksum-failed")
    header_len = struct.unpack("<I", raw[8:12])[0]
    header = json.loads(raw[12:12 + header_len])
    arrays: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        blob = raw[offset:offset + 8 * n]
        if len(blob) != 8 * n:
            raise CheckpointError("checksum-failed", "truncated blob")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
        offset += 8 * n
    return arrays, header["meta"]
