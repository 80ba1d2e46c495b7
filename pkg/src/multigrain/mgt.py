"""Reader/writer for the MGT1 binary tensor format.

Layout: ``b"MGT1"``, u8 dtype code (0 = float64, 1 = float32), u8 ndim,
``ndim`` little-endian u32 extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MGT1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class FormatError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic; not an MGT1 tensor")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", buf, 6)
    offset = 6 + 4 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != count * dtype.itemsize:
        raise FormatError(f"payload size mismatch for shape {shape}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
