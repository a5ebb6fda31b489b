"""Named-tensor binary container used for checkpoints and prepared domains.

Layout, all integers little-endian::

    magic        8 bytes   b"DGMXTNSR"
    version      uint32
    digest       32 bytes  sha256 of the producing config (zeros if none)
    count        uint32
    count x {
        name_len uint32, name utf-8,
        rank     uint32, extents uint64 x rank,
        values   float64 x prod(extents)
    }
    checksum     8 bytes   blake2b-64 of every preceding byte
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, CheckpointVersionError, ChecksumError

MAGIC = b"DGMXTNSR"
VERSION = 1
DIGEST_SIZE = 32
_HEADER = struct.Struct("<8sI32sI")


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_tensors(tensors, digest=b"") -> bytes:
    digest = digest.ljust(DIGEST_SIZE, b"\0")[:DIGEST_SIZE]
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, digest, len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + checksum(body)


def decode_tensors(blob: bytes):
    """Inverse of :func:`encode_tensors`; returns ``(digest, {name: float64 array})``."""
    if len(blob) < _HEADER.size + 8:
        raise ChecksumError(f"file too short ({len(blob)} bytes)")
    body, tail = blob[:-8], blob[-8:]
    if checksum(body) != tail:
        raise ChecksumError("checksum mismatch (truncated or corrupted file)")
    magic, version, digest, count = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {VERSION}")
    pos = _HEADER.size
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"malformed tensor record: {exc}") from exc
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after {count} tensors")
    return digest, out


def save_tensors(path, tensors, digest=b""):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors, digest))


def load_tensors(path):
    return decode_tensors(Path(path).read_bytes())
