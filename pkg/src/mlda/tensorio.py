"""Binary container for named float64 tensors.

Layout, little-endian, no padding::

    b"LADT"  u16 version  u16 entry_count
    per entry: u16 name_len, name (UTF-8), u8 rank, rank x u32 extents,
               prod(extents) x float64 payload (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LADT"
VERSION = 1


class TensorFileError(Exception):
    pass


class BadMagicError(TensorFileError):
    pass


class TruncatedError(TensorFileError):
    pass


class ShapeMismatchError(TensorFileError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    if len(tensors) > 0xFFFF:
        raise ValueError("too many tensors for one file")
    out = [MAGIC, struct.pack("<HH", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r}: name or rank too large")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"truncated {what}: need {n} bytes at offset {pos}, "
                                 f"{len(data) - pos} left")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HH", take(4, "header"))
    if version != VERSION:
        raise TensorFileError(f"unsupported format version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64))
        payload = take(8 * size, "payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(data):
        raise ShapeMismatchError(f"{len(data) - pos} trailing bytes after {count} entries; "
                                 "extents disagree with payload length")
    return tensors


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
