"""Minimal binary tensor container.

A record is::

    b"TNSR" | version: u16 | dtype code: u8 | ndim: u8 | shape: u64[ndim] | payload

all little-endian, payload row-major. Dtype codes: 0 = float32, 1 = float64,
2 = complex64 (interleaved float32 pairs). A file is a sequence of records.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR"
VERSION = 1

_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<c8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.complex64): 2}


def encode(array) -> bytes:
    array = np.asarray(array)
    try:
        code = _DTYPE_TO_CODE[array.dtype.newbyteorder("=")]
    except KeyError:
        raise FormatError(f"unsupported dtype {array.dtype}; use float32, float64 or complex64") from None
    if array.ndim > 255:
        raise FormatError("too many dimensions")
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_CODES[code]).tobytes(order="C")
    return header + payload


def _decode_one(stream: io.BufferedIOBase):
    magic = stream.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    head = stream.read(4)
    if len(head) != 4:
        raise FormatError("truncated header")
    version, code, ndim = struct.unpack("<HBB", head)
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    raw_shape = stream.read(8 * ndim)
    if len(raw_shape) != 8 * ndim:
        raise FormatError("truncated shape")
    shape = struct.unpack(f"<{ndim}Q", raw_shape)
    dtype = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"payload length {len(payload)} != expected {nbytes}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def decode(data: bytes) -> list[np.ndarray]:
    stream = io.BytesIO(data)
    out = []
    while (arr := _decode_one(stream)) is not None:
        out.append(arr)
    return out


def write_tensors(path, arrays) -> None:
    """Write arrays as consecutive records; atomic with respect to readers."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for arr in arrays:
            fh.write(encode(arr))
    os.replace(tmp, path)


def read_tensors(path) -> list[np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing tensor file {path}") from None
    return decode(data)


def write_tensor(path, array) -> None:
    write_tensors(path, [array])


def read_tensor(path) -> np.ndarray:
    arrays = read_tensors(path)
    if len(arrays) != 1:
        raise FormatError(f"{path}: expected one tensor, found {len(arrays)}")
    return arrays[0]
