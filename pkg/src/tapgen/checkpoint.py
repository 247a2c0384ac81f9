"""Binary checkpoint container for named float64 tensors.

Layout (all integers little endian):

    magic   4 bytes, b"TSA1"
    digest  32 bytes, sha256 of the canonical model config text
    count   u32, number of tensors
    then per tensor:
        name_len u16, name utf-8
        rank     u8
        dims     rank * u32
        data     prod(dims) float64, C order

The digest ties a parameter file to the architecture that produced it;
loaders compare it before trusting any shapes.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"TSA1"
DIGEST_LEN = 32


def config_digest(canonical_text: str) -> bytes:
    return hashlib.sha256(canonical_text.encode("utf-8")).digest()


def save_tensors(path, digest: bytes, tensors: Mapping[str, np.ndarray]):
    if len(digest) != DIGEST_LEN:
        raise ValueError("digest must be %d bytes, got %d"
                         % (DIGEST_LEN, len(digest)))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(digest)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype=np.float64)
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError("tensor name too long: %r" % name[:64])
            if arr.ndim > 0xFF:
                raise ValueError("tensor rank too large: %d" % arr.ndim)
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("%s: truncated while reading %s" % (path, what))
    return buf


def load_tensors(path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Read a checkpoint, returning (digest, {name: array})."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != MAGIC:
            raise CheckpointError(
                "%s: bad magic %r; not a checkpoint file" % (path, magic))
        digest = _read_exact(fh, DIGEST_LEN, path, "config digest")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack(
                "<H", _read_exact(fh, 2, path, "name length"))
            name = _read_exact(fh, name_len, path, "name").decode("utf-8")
            if name in tensors:
                raise CheckpointError("%s: duplicate tensor %r" % (path, name))
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, path, "rank"))
            dims = struct.unpack(
                "<" + "I" * rank, _read_exact(fh, 4 * rank, path, "dims"))
            n_values = 1
            for dim in dims:
                n_values *= dim
            raw = _read_exact(fh, 8 * n_values, path, "tensor data")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("%s: trailing bytes after last tensor" % path)
    return digest, tensors


def check_digest(path, found: bytes, expected: bytes):
    if found != expected:
        raise CheckpointError(
            "%s: config digest mismatch; the checkpoint was trained with a "
            "different model configuration" % path)
