import io
import struct

import numpy as np
import pytest

from tensorfile import MAGIC, TensorFileError, load_tensor, read_tensor, save_tensor, write_tensor


def test_layout_is_little_endian_header_then_payload():
    buf = io.BytesIO()
    n = write_tensor(buf, np.arange(6, dtype=np.float32).reshape(2, 3))
    data = buf.getvalue()
    assert n == len(data) == 12 + 8 + 24
    assert data[:4] == MAGIC
    assert struct.unpack("<III", data[4:16]) == (1, 2, 2)
    assert struct.unpack("<I", data[16:20]) == (3,)
    assert struct.unpack("<6f", data[20:]) == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)


def test_save_and_load(tmp_path, rng):
    arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
    save_tensor(tmp_path / "a.mvtf", arr)
    back = load_tensor(tmp_path / "a.mvtf")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_float64_is_stored_as_float32(tmp_path):
    save_tensor(tmp_path / "a.mvtf", np.array([0.1, 0.2]))
    np.testing.assert_array_equal(load_tensor(tmp_path / "a.mvtf"), np.array([0.1, 0.2], dtype=np.float32))


def test_empty_tensor(tmp_path):
    save_tensor(tmp_path / "e.mvtf", np.zeros((0, 4)))
    assert load_tensor(tmp_path / "e.mvtf").shape == (0, 4)


def test_bad_magic():
    with pytest.raises(TensorFileError, match="magic"):
        read_tensor(io.BytesIO(b"XXXX" + struct.pack("<II", 1, 0) + b"\0" * 4))


def test_unsupported_dtype():
    with pytest.raises(TensorFileError, match="dtype"):
        read_tensor(io.BytesIO(MAGIC + struct.pack("<II", 2, 0)))


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.mvtf"
    save_tensor(path, np.ones((4, 4)))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(TensorFileError, match="truncated"):
        load_tensor(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "t.mvtf"
    save_tensor(path, np.ones(2))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(TensorFileError, match="trailing"):
        load_tensor(path)
