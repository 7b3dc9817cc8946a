"""Low-level binary IO helpers shared by the grid/field/optimizer file formats.

All multi-byte values are little-endian. Arrays of f32 are written in the
order the caller supplies; grid serialization uses x-fastest (Fortran) order.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when a binary file does not match its declared format."""


def write_magic(f: BinaryIO, magic: bytes, version: int) -> None:
    assert len(magic) == 4
    f.write(magic)
    f.write(struct.pack("<I", version))


def read_magic(f: BinaryIO, magic: bytes, expect_version: int) -> int:
    got = f.read(4)
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")
    version = read_u32(f)
    if version != expect_version:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return version


def write_u32(f: BinaryIO, *values: int) -> None:
    f.write(struct.pack(f"<{len(values)}I", *values))


def read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def write_u64(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<Q", value & 0xFFFFFFFFFFFFFFFF))


def read_u64(f: BinaryIO) -> int:
    return struct.unpack("<Q", _read_exact(f, 8))[0]


def write_f32(f: BinaryIO, *values: float) -> None:
    f.write(struct.pack(f"<{len(values)}f", *values))


def read_f32(f: BinaryIO, count: int = 1) -> tuple[float, ...]:
    return struct.unpack(f"<{count}f", _read_exact(f, 4 * count))


def write_f64(f: BinaryIO, *values: float) -> None:
    f.write(struct.pack(f"<{len(values)}d", *values))


def read_f64(f: BinaryIO, count: int = 1) -> tuple[float, ...]:
    return struct.unpack(f"<{count}d", _read_exact(f, 8 * count))


def write_f32_array(f: BinaryIO, arr: np.ndarray, order: str = "C") -> None:
    data = np.ascontiguousarray(arr.astype("<f4", copy=False).ravel(order=order))
    f.write(data.tobytes())


def read_f32_array(f: BinaryIO, shape: tuple[int, ...], order: str = "C") -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    raw = _read_exact(f, 4 * n)
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return flat.reshape(shape, order=order)


def write_f64_array(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr.astype("<f8", copy=False)).tobytes())


def read_f64_array(f: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    raw = _read_exact(f, 8 * n)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


_read_exact = read_exact
