"""Binary ``.harw`` container for windowed datasets.

Layout, all little-endian::

    magic      4s   b"HARW"
    version    u32
    n          u64
    n_c        u32
    n_w        u32
    n_a        u32
    n_subj     u32
    X          float32[n * n_c * n_w]   row-major
    Y          int32[n]
    S          int32[n]
    subjects   int32[n_subj]
    crc32      u32  over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .types import DataError, WindowedDataset

MAGIC = b"HARW"
VERSION = 1
_HEADER = struct.Struct("<4sIQIIII")


class ContainerError(DataError):
    pass


def to_bytes(ds: WindowedDataset) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, ds.n, ds.n_c, ds.n_w, ds.n_a, len(ds.subject_ids))
    body = b"".join([
        header,
        ds.X.astype("<f4", copy=False).tobytes(order="C"),
        ds.Y.astype("<i4").tobytes(),
        ds.S.astype("<i4").tobytes(),
        np.asarray(ds.subject_ids, dtype="<i4").tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf: bytes, source: str = "<bytes>") -> WindowedDataset:
    if len(buf) < _HEADER.size + 4:
        raise ContainerError(f"{source}: truncated container ({len(buf)} bytes)")
    magic, version, n, n_c, n_w, n_a, n_subj = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ContainerError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported version {version}")
    expected = _HEADER.size + 4 * (n * n_c * n_w + 2 * n + n_subj) + 4
    if len(buf) != expected:
        raise ContainerError(f"{source}: size {len(buf)} does not match header (expected {expected})")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise ContainerError(f"{source}: checksum mismatch, file is corrupt")
    off = _HEADER.size
    X = np.frombuffer(buf, dtype="<f4", count=n * n_c * n_w, offset=off).reshape(n, n_c, n_w)
    off += 4 * n * n_c * n_w
    Y = np.frombuffer(buf, dtype="<i4", count=n, offset=off)
    off += 4 * n
    S = np.frombuffer(buf, dtype="<i4", count=n, offset=off)
    off += 4 * n
    subjects = np.frombuffer(buf, dtype="<i4", count=n_subj, offset=off)
    return WindowedDataset(X.astype(np.float32), Y, S, int(n_a), subjects.tolist())


def save_dataset(ds: WindowedDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load_dataset(path) -> WindowedDataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return from_bytes(path.read_bytes(), str(path))
