"""Versioned checkpoint container.

Layout: magic ``b"CEATCK1\\0"``, u32 format version, u64 header length, a
canonical JSON header (sorted keys, compact separators), then the raw
little-endian array payloads in header order. Equal content always
serializes to equal bytes, so ``save(load(x))`` reproduces ``x``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CEATCK1\0"
VERSION = 1
_PRELUDE = struct.Struct("<IQ")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _PRELUDE.pack(VERSION, len(header)) + header + b"".join(blobs)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    start = len(MAGIC) + _PRELUDE.size
    if len(buf) < start or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = _PRELUDE.unpack_from(buf, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[start : start + hlen])
    except ValueError as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(buf):
            raise CheckpointError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    end = base + sum(e["nbytes"] for e in header["arrays"])
    if end != len(buf):
        raise CheckpointError("trailing bytes after payload")
    return header["meta"], arrays


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_checkpoint(meta, arrays))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
