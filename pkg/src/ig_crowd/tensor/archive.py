from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

# "TGE1" | u8 dtype tag | u8 ndim | ndim x u32 LE extents | row-major LE payload
MAGIC = b"TGE1"
DTYPE_F64 = 1
_DTYPES = {DTYPE_F64: np.dtype("<f8")}


class ArchiveError(RuntimeError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f8")
    if arr.ndim > 255:
        raise ArchiveError(f"cannot archive {arr.ndim}-D arrays")
    if any(d <= 0 for d in arr.shape):
        raise ArchiveError(f"extents must be positive, got {list(arr.shape)}")
    header = MAGIC + struct.pack("<BB", DTYPE_F64, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise ArchiveError("not a tensor archive (bad magic)")
    tag, ndim = struct.unpack_from("<BB", blob, 4)
    if tag not in _DTYPES:
        raise ArchiveError(f"unsupported dtype tag {tag}")
    offset = 6 + 4 * ndim
    if len(blob) < offset:
        raise ArchiveError("truncated tensor archive header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    dtype = _DTYPES[tag]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise ArchiveError(f"payload has {len(payload)} bytes, dims {list(dims)} need {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float64)


def save_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ArchiveError(f"tensor archive not found: {p}")
    return decode_tensor(p.read_bytes())
