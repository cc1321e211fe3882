"""Named Tensor Archive (``.nta``) reader/writer.

Layout, all integers little-endian::

    b"NTAR"                     magic
    u32  version                (currently 1)
    u32  entry count
    per entry:
        u32  name length, UTF-8 name
        u8   dtype code          (1 = float32, 2 = uint8)
        u8   rank
        u64  dim * rank
        payload, row-major, product(dims) * itemsize bytes
    u64  metadata length
    UTF-8 metadata: one "key=value" line per entry, sorted by key, LF-terminated
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NTAR"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2}


class ArchiveError(ValueError):
    pass


def _encode_metadata(meta: Mapping[str, str]) -> bytes:
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if not key or "=" in key or "\n" in key or "\n" in value:
            raise ArchiveError(f"metadata entry {key!r} cannot be encoded as a key=value line")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def _decode_metadata(raw: bytes) -> dict[str, str]:
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise ArchiveError(f"malformed metadata line {line!r}")
        meta[key] = value
    return meta


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = CODES.get(arr.dtype)
        if code is None:
            raise ArchiveError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    meta = _encode_metadata(metadata or {})
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError("truncated archive")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ArchiveError("not a Named Tensor Archive (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        if name in tensors:
            raise ArchiveError(f"duplicate entry {name!r}")
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise ArchiveError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    (meta_len,) = struct.unpack("<Q", take(8))
    meta = _decode_metadata(bytes(take(meta_len)))
    if pos != len(view):
        raise ArchiveError("trailing bytes after metadata block")
    return tensors, meta


def write_archive(path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> Path:
    path = Path(path)
    data = dumps(tensors, metadata)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def read_archive(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
