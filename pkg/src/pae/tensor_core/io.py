"""PAET binary tensor files.

Layout (little-endian): magic ``b"PAET"``, u32 format version, u32 rank,
rank x u64 dims, then prod(dims) f64 values in row-major order.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"PAET"
VERSION = 1


def encode_tensor(array) -> bytes:
    array = np.asarray(getattr(array, "data", array), dtype="<f8", order="C")
    header = MAGIC + struct.pack("<II", VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ContractError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContractError(f"unsupported tensor format version {version}")
    offset = 12
    dims = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise ContractError(
            f"payload holds {(len(blob) - offset) // 8} values, dims {dims} need {count}")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
