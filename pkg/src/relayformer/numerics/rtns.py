"""RTNS tensor container: ``b"RTNS"``, u32 version, u8 dtype, u8 ndim,
ndim u64 extents, then the row-major payload, all little-endian."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from relayformer.errors import ContractError
from relayformer.numerics.tensor import Tensor

MAGIC = b"RTNS"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_FROM_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _CODES:
        raise ContractError(f"RTNS cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ContractError("too many dimensions for RTNS")
    header = MAGIC + struct.pack("<IBB", VERSION, _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
    return header + payload.tobytes()


def decode(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ContractError("not an RTNS container")
    version, code, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise ContractError(f"unsupported RTNS version {version}")
    if code not in _FROM_CODE:
        raise ContractError(f"unknown RTNS dtype code {code}")
    offset = 10
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    dt = _FROM_CODE[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) - offset != count * dt.itemsize:
        raise ContractError("RTNS payload length does not match its extents")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(dims)
    return Tensor(arr.astype(dt.newbyteorder("="), copy=True))


def save(path: str | Path, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(encode(t))


def load(path: str | Path) -> Tensor:
    return decode(Path(path).read_bytes())
