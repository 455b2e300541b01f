"""Binary tensor container ("HARC" files).

Layout, all integers little-endian::

    b"HARC" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims... | f32 payload
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from harc.errors import CorruptionError, UnsupportedVersionError

MAGIC = b"HARC"
VERSION = 1


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.require(np.asarray(tensors[name], dtype="<f4"), requirements="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptionError("not a HARC container (bad magic or too short)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("CRC mismatch: file is truncated or corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version > VERSION:
        raise UnsupportedVersionError(f"container version {version} is newer than supported {VERSION}")
    if version < 1:
        raise CorruptionError(f"invalid container version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = body[pos : pos + 4 * size]
            if len(payload) != 4 * size:
                raise CorruptionError(f"tensor {name!r} payload truncated")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CorruptionError(f"malformed container: {exc}") from None
    if pos != len(body):
        raise CorruptionError(f"{len(body) - pos} trailing bytes after last tensor")
    return out


def crc_of(blob: bytes) -> int:
    """The trailing CRC field of an encoded container."""
    return struct.unpack("<I", blob[-4:])[0]


def write_container(path: str | Path, tensors: dict[str, np.ndarray]) -> int:
    blob = encode_tensors(tensors)
    Path(path).write_bytes(blob)
    return crc_of(blob)


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def bytes_to_tensor(raw: bytes) -> np.ndarray:
    """Pack arbitrary bytes into a float32 vector (one byte per element, exact)."""
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    vals = np.asarray(arr).reshape(-1)
    if np.any((vals < 0) | (vals > 255) | (vals != np.round(vals))):
        raise CorruptionError("metadata tensor holds non-byte values")
    return vals.astype(np.uint8).tobytes()
