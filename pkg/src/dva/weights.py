"""Binary weight file.

Layout (all little-endian)::

    b"DVAW"  u32 version=1  u32 layer_count
    layer_count x { u16 name_len, name (utf-8), u8 rank, u32 dims[rank], f64 data[prod(dims)] }
    u64 FNV-1a checksum of every preceding byte

Entries are written in the order given, which for a network state is the
canonical parameter order, so identical states produce identical files.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IntegrityError
from .kernels import fnv1a64

MAGIC = b"DVAW"
VERSION = 1


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise IntegrityError("bad magic: not a DVAW weight file")
    if len(blob) < 20:
        raise IntegrityError("checksum mismatch: file truncated")
    body = memoryview(blob)[:-8]
    (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if fnv1a64(body) != stored:
        raise IntegrityError("checksum mismatch: file corrupt or truncated")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported weight file version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = bytes(blob[off : off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 8 * size > len(body):
                raise IntegrityError(f"layer {name!r} overruns the file")
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64)
            off += 8 * size
            out[name] = arr.reshape(dims)
    except (struct.error, UnicodeDecodeError) as exc:
        raise IntegrityError(f"malformed layer table: {exc}") from exc
    if off != len(body):
        raise IntegrityError("trailing bytes after layer table")
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_entries(path, entries: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(entries))


def read_entries(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read weight file {path}: {exc}") from exc
    return decode(blob)


def checksum_of_file(path) -> int:
    """The stored trailing checksum (identical files <=> identical value)."""
    blob = Path(path).read_bytes()
    return struct.unpack("<Q", blob[-8:])[0]
