"""Binary tensor files.

Layout, all little-endian::

    b"ATN1" | dtype: u8 (0 = float32, 1 = float64) | rank: u32 | dims: rank x u32 | payload

The payload is row-major. Writes go to a temporary file in the target
directory and are renamed into place, so a failed write leaves nothing behind.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import TensorFormatError

MAGIC = b"ATN1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
RANKS = (1, 2, 3)


@dataclass(frozen=True)
class TensorHeader:
    dtype: np.dtype
    dims: tuple

    @property
    def nbytes(self):
        return 4 + 1 + 4 + 4 * len(self.dims)

    @property
    def payload_bytes(self):
        return int(np.prod(self.dims, dtype=np.int64)) * self.dtype.itemsize


def encode(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in CODES:
        raise TensorFormatError(f"unsupported dtype {a.dtype}; use float32 or float64")
    if a.ndim not in RANKS:
        raise TensorFormatError(f"rank must be one of {RANKS}, got {a.ndim}")
    code = CODES[a.dtype]
    head = MAGIC + struct.pack("<BI", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()


def decode_header(data: bytes, path=None) -> TensorHeader:
    if len(data) < 9:
        raise TensorFormatError("file shorter than the fixed header", offset=len(data), path=path)
    if data[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {data[:4]!r}", offset=0, path=path)
    code, rank = struct.unpack_from("<BI", data, 4)
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}", offset=4, path=path)
    if rank not in RANKS:
        raise TensorFormatError(f"rank {rank} not in {RANKS}", offset=5, path=path)
    if len(data) < 9 + 4 * rank:
        raise TensorFormatError("dims truncated", offset=len(data), path=path)
    dims = struct.unpack_from(f"<{rank}I", data, 9)
    return TensorHeader(DTYPES[code], tuple(dims))


def decode(data: bytes, path=None) -> np.ndarray:
    h = decode_header(data, path)
    got = len(data) - h.nbytes
    if got != h.payload_bytes:
        raise TensorFormatError(
            f"payload is {got} bytes, header implies {h.payload_bytes}", offset=h.nbytes, path=path
        )
    return np.frombuffer(data, dtype=h.dtype, offset=h.nbytes).reshape(h.dims).astype(h.dtype.newbyteorder("="))


def atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, array):
    atomic_write(path, encode(array))


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise TensorFormatError(f"cannot read: {exc.strerror}", path=os.fspath(path)) from exc
    return decode(data, os.fspath(path))
