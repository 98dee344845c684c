"""
TensorFile ("MVTF") codec.

Layout, little-endian: magic b"MVTF", uint32 dtype code, uint32 ndim,
uint32 dims[ndim], then the row-major float32 payload (4·prod(dims) bytes).
"""

import io
import logging
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"MVTF"
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<4sII")


class TensorFileError(ValueError):
    pass


def write_tensor(stream: BinaryIO, array: np.ndarray) -> int:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = _HEADER.pack(MAGIC, DTYPE_FLOAT32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.tobytes(order="C")
    stream.write(header)
    stream.write(payload)
    return len(header) + len(payload)


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise TensorFileError(f"truncated {what}: expected {n} bytes, got {len(data)}")
    return data


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic, dtype_code, ndim = _HEADER.unpack(_read_exact(stream, _HEADER.size, "header"))
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}")
    if dtype_code != DTYPE_FLOAT32:
        raise TensorFileError(f"unsupported dtype code {dtype_code}")
    if ndim > 16:
        raise TensorFileError(f"implausible ndim {ndim}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim, "dims"))
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = _read_exact(stream, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    stream = io.BytesIO(data)
    arr = read_tensor(stream)
    if stream.tell() != len(data):
        raise TensorFileError(f"{path}: {len(data) - stream.tell()} trailing bytes")
    return arr
