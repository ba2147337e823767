"""UPTN binary tensor files.

Layout: ``b"UPTN"``, one byte rank, ``rank`` little-endian u32 extents, one
byte precision code (4 = f32, 8 = f64), then the raw little-endian values in
row-major order.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"UPTN"
_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class UPTNError(ValueError):
    pass


def to_bytes(arr, precision=None):
    arr = np.asarray(arr)
    if precision is None:
        precision = 8 if arr.dtype == np.float64 else 4
    if precision not in _CODES:
        raise UPTNError(f"unsupported precision code {precision}")
    if arr.ndim > 255:
        raise UPTNError("rank exceeds 255")
    data = np.ascontiguousarray(arr, dtype=_CODES[precision])
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<B", precision) + data.tobytes()


def from_bytes(buf):
    if buf[:4] != MAGIC:
        raise UPTNError("bad magic, not a UPTN tensor")
    rank = buf[4]
    off = 5
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    code = buf[off]
    off += 1
    if code not in _CODES:
        raise UPTNError(f"unknown precision code {code}")
    dtype = _CODES[code]
    count = int(np.prod(shape)) if rank else 1
    expected = off + count * dtype.itemsize
    if len(buf) != expected:
        raise UPTNError(f"payload size {len(buf) - off} does not match shape {shape}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def write_tensor(path, arr, precision=None):
    Path(path).write_bytes(to_bytes(arr, precision))


def read_tensor(path):
    return from_bytes(Path(path).read_bytes())
