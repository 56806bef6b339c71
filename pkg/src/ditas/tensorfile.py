"""Binary tensor container and payload fingerprints.

Layout (all integers little-endian)::

    magic   4 bytes  b"DTAS"
    version u32      1
    dtype   u8       0 = float32, 1 = uint8 codes, 2 = float64
    ndim    u8
    dims    ndim x u64
    payload row-major values
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "VERSION",
    "DTYPE_F32",
    "DTYPE_U8",
    "DTYPE_F64",
    "TensorFileError",
    "encode_tensor",
    "decode_tensor",
    "write_tensor",
    "read_tensor",
    "read_payload",
    "fnv1a64",
    "atomic_write_bytes",
    "atomic_write_text",
]

MAGIC = b"DTAS"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1
DTYPE_F64 = 2

_NUMPY_DTYPES = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_U8: np.dtype("u1"),
    DTYPE_F64: np.dtype("<f8"),
}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class TensorFileError(ValueError):
    pass


def encode_tensor(array, dtype: int = DTYPE_F64) -> bytes:
    if dtype not in _NUMPY_DTYPES:
        raise TensorFileError(f"unknown dtype code {dtype}")
    array = np.asarray(array)
    if array.ndim > 255:
        raise TensorFileError("too many dimensions")
    if dtype == DTYPE_U8:
        if array.size and (array.min() < 0 or array.max() > 255 or not np.all(array == np.round(array))):
            raise TensorFileError("uint8 payload needs integer values in [0, 255]")
    payload = np.ascontiguousarray(array, dtype=_NUMPY_DTYPES[dtype]).tobytes()
    header = MAGIC + struct.pack("<IBB", VERSION, dtype, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + payload


def _parse_header(data: bytes, source: str) -> tuple[int, tuple[int, ...], int]:
    if len(data) < 10 or data[:4] != MAGIC:
        raise TensorFileError(f"{source}: bad magic")
    version, dtype, ndim = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise TensorFileError(f"{source}: unsupported version {version}")
    if dtype not in _NUMPY_DTYPES:
        raise TensorFileError(f"{source}: unknown dtype code {dtype}")
    offset = 10 + 8 * ndim
    if len(data) < offset:
        raise TensorFileError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", data, 10)
    expected = int(np.prod(dims, dtype=np.int64)) * _NUMPY_DTYPES[dtype].itemsize
    if len(data) - offset != expected:
        raise TensorFileError(
            f"{source}: payload is {len(data) - offset} bytes, header promises {expected}"
        )
    return dtype, dims, offset


def decode_tensor(data: bytes, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Return ``(array, dtype_code)``; float32 payloads come back as float64."""
    dtype, dims, offset = _parse_header(data, source)
    arr = np.frombuffer(data, dtype=_NUMPY_DTYPES[dtype], offset=offset).reshape(dims)
    if dtype == DTYPE_U8:
        return arr.copy(), dtype
    return arr.astype(np.float64), dtype


def write_tensor(path, array, dtype: int = DTYPE_F64) -> None:
    atomic_write_bytes(path, encode_tensor(array, dtype))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))[0]


def read_payload(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    _, _, offset = _parse_header(data, str(path))
    return data[offset:]


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
