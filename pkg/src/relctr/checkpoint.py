"""Binary checkpoint format for named parameter arrays.

Layout (all integers little-endian)::

    magic   8 bytes  b"RCTRCKPT"
    version u32
    count   u32
    count x block:
        name_len u32, name utf-8, rank u32, rank x u32 dims, float32 payload
    checksum u64   (blake2b-64 over all payload bytes, in block order)
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RCTRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _checksum(payloads: list[bytes]) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in payloads:
        h.update(p)
    return struct.unpack("<Q", h.digest())[0]


def save(path: str | Path, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    payloads = []
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        payload = arr.astype("<f4").tobytes(order="C")
        payloads.append(payload)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(payload)
    chunks.append(struct.pack("<Q", _checksum(payloads)))
    path.write_bytes(b"".join(chunks))
    return path


def load(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    payloads = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(shape)) * 4
            payload = buf[off:off + size]
            if len(payload) != size:
                raise CheckpointError(f"{path}: truncated payload for {name}")
            off += size
            payloads.append(payload)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
        (stored,) = struct.unpack_from("<Q", buf, off)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file") from exc
    if stored != _checksum(payloads):
        raise CheckpointError(f"{path}: checksum mismatch")
    return out


def round_to_f32(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """What a save/load cycle does to the values."""
    return {k: np.asarray(v).astype(np.float32).astype(np.float64) for k, v in arrays.items()}
