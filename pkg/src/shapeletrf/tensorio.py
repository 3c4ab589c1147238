"""Versioned binary container of named float64 tensors.

Layout::

    b"SRFTENS\\0"  | u32 version | u64 header length | JSON header
    | tensor data (little-endian float64, header order) | u32 CRC-32 of all preceding bytes

The header lists every tensor's name and shape plus arbitrary extra
fields (group, trainable flag) and a free-form ``meta`` object.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SRFTENS\x00"
VERSION = 1
_F64 = np.dtype("<f8")


class TensorFileError(ValueError):
    """Corrupt, truncated or incompatible tensor file."""


def write_tensors(path, tensors: list[tuple[str, np.ndarray, dict]], meta: dict | None = None) -> None:
    entries, blobs = [], []
    for name, arr, extra in tensors:
        arr = np.ascontiguousarray(arr, dtype=_F64)
        entries.append({"name": name, "shape": list(arr.shape), **extra})
        blobs.append(arr.tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_tensors(path) -> tuple[list[tuple[str, np.ndarray, dict]], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise TensorFileError(f"cannot read {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 16 or raw[: len(MAGIC)] != MAGIC:
        raise TensorFileError(f"{path}: not a tensor file or truncated header")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version} (expected {VERSION})")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    start = len(MAGIC) + 12
    if start + hlen > len(body):
        raise TensorFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise TensorFileError(f"{path}: corrupt header") from exc
    offset = start + hlen
    expected = offset + sum(int(np.prod(e["shape"], dtype=np.int64)) * 8 for e in header["tensors"])
    if len(body) != expected:
        raise TensorFileError(f"{path}: truncated or padded data ({len(body)} bytes, expected {expected})")
    if zlib.crc32(body) != crc:
        raise TensorFileError(f"{path}: checksum mismatch")
    out = []
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=_F64, count=n, offset=offset).reshape(e["shape"]).copy()
        offset += n * 8
        extra = {k: v for k, v in e.items() if k not in ("name", "shape")}
        out.append((e["name"], arr, extra))
    return out, header["meta"]
