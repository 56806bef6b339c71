import struct

import numpy as np
import pytest

from ditas.tensorfile import (
    DTYPE_F32,
    DTYPE_F64,
    DTYPE_U8,
    MAGIC,
    TensorFileError,
    decode_tensor,
    encode_tensor,
    fnv1a64,
    read_payload,
    read_tensor,
    write_tensor,
)


def test_fnv_known_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_header_layout():
    data = encode_tensor(np.arange(6.0).reshape(2, 3), DTYPE_F64)
    assert data[:4] == MAGIC
    version, dtype, ndim = struct.unpack_from("<IBB", data, 4)
    assert (version, dtype, ndim) == (1, DTYPE_F64, 2)
    assert struct.unpack_from("<2Q", data, 10) == (2, 3)
    assert np.array_equal(np.frombuffer(data[26:], "<f8"), np.arange(6.0))


@pytest.mark.parametrize("dtype", [DTYPE_F32, DTYPE_U8, DTYPE_F64])
def test_roundtrip(rng, dtype, tmp_path):
    for _ in range(20):
        shape = tuple(rng.integers(1, 5, size=rng.integers(0, 4)))
        if dtype == DTYPE_U8:
            x = rng.integers(0, 256, size=shape).astype(np.uint8)
        elif dtype == DTYPE_F32:
            x = rng.standard_normal(shape).astype(np.float32)
        else:
            x = rng.standard_normal(shape)
        back, got = decode_tensor(encode_tensor(x, dtype))
        assert got == dtype and back.shape == x.shape
        assert np.array_equal(back, x.astype(back.dtype))
        path = tmp_path / "t.dtas"
        write_tensor(path, x, dtype)
        assert np.array_equal(read_tensor(path), back)
        assert read_payload(path) == encode_tensor(x, dtype)[10 + 8 * x.ndim :]


def test_empty_dimension_roundtrip():
    back, _ = decode_tensor(encode_tensor(np.zeros((0, 3))))
    assert back.shape == (0, 3)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:4] + struct.pack("<I", 9) + d[8:],
        lambda d: d[:8] + bytes([7]) + d[9:],
        lambda d: d[:-1],
        lambda d: d + b"\0",
        lambda d: d[:6],
    ],
)
def test_malformed_rejected(mutate):
    data = encode_tensor(np.ones((2, 2)))
    with pytest.raises(TensorFileError):
        decode_tensor(mutate(data))


def test_u8_range_checked():
    with pytest.raises(TensorFileError):
        encode_tensor(np.array([256.0]), DTYPE_U8)


def test_payload_change_changes_fingerprint():
    a = encode_tensor(np.ones(4))
    b = bytearray(a)
    b[-1] ^= 1
    assert fnv1a64(bytes(a[10 + 8 :])) != fnv1a64(bytes(b[10 + 8 :]))
