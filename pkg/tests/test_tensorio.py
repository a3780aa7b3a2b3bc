import os
import struct

import numpy as np
import pytest

from histmax import tensorio
from histmax.errors import TensorFormatError
from histmax.tensorio import decode, encode, read_tensor, write_tensor


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(5,), (3, 4), (2, 3, 4), (1,)])
def test_roundtrip(tmp_path, dtype, shape, rng):
    a = rng.standard_normal(shape).astype(dtype)
    path = tmp_path / "t.atn"
    write_tensor(path, a)
    b = read_tensor(path)
    assert b.dtype == dtype and b.shape == shape
    np.testing.assert_array_equal(a, b)


def test_layout_is_little_endian():
    blob = encode(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert blob[:4] == b"ATN1"
    assert blob[4] == 0
    assert struct.unpack("<III", blob[5:17]) == (2, 1, 3)
    assert np.frombuffer(blob[17:], "<f4").tolist() == [1.0, 2.0, 3.0]
    assert len(encode(np.zeros((4096, 64), np.float32))) == 4096 * 64 * 4 + 4 + 1 + 4 + 8


def test_rejects_unsupported_arrays():
    with pytest.raises(TensorFormatError):
        encode(np.zeros(3, dtype=np.int32))
    with pytest.raises(TensorFormatError):
        encode(np.zeros((1, 1, 1, 1)))
    with pytest.raises(TensorFormatError):
        encode(np.float64(1.0))


@pytest.mark.parametrize(
    "blob, offset",
    [
        (b"ATN", 3),
        (b"XXXX" + bytes(5), 0),
        (b"ATN1" + bytes([7]) + struct.pack("<I", 1), 4),
        (b"ATN1" + bytes([1]) + struct.pack("<I", 4), 5),
        (b"ATN1" + bytes([1]) + struct.pack("<I", 2) + struct.pack("<I", 3), 13),
        (b"ATN1" + bytes([1]) + struct.pack("<II", 1, 2) + bytes(15), 13),
    ],
)
def test_decode_errors_carry_offsets(blob, offset):
    with pytest.raises(TensorFormatError) as err:
        decode(blob, path="x.atn")
    assert err.value.offset == offset
    assert "x.atn" in str(err.value)


def test_missing_file(tmp_path):
    with pytest.raises(TensorFormatError) as err:
        read_tensor(tmp_path / "nope.atn")
    assert "nope.atn" in str(err.value)


def test_failed_write_leaves_nothing(tmp_path, monkeypatch):
    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(tensorio.os, "replace", boom)
    with pytest.raises(OSError):
        write_tensor(tmp_path / "t.atn", np.zeros(3))
    assert os.listdir(tmp_path) == []
