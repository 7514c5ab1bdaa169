"""Binary tensor files.

Layout: ASCII magic ``SORA``, u8 version (1), u8 rank, ``rank`` little-endian
u64 extents, then the row-major little-endian f64 payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import ContractError

MAGIC = b"SORA"
VERSION = 1


def tensor_to_bytes(array) -> bytes:
    arr = np.array(array, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
    if arr.ndim > 255:
        raise ContractError(f"rank {arr.ndim} exceeds the u8 rank field")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ContractError("not a tensor file (bad magic)")
    if len(blob) < 6:
        raise ContractError("truncated tensor header")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != VERSION:
        raise ContractError(f"unsupported tensor file version {version}")
    offset = 6
    if len(blob) < offset + 8 * rank:
        raise ContractError(f"truncated tensor header for rank {rank}")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise ContractError(f"payload holds {len(blob) - offset} bytes, expected {8 * count} for shape {shape}")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, array) -> None:
    atomic_write_bytes(path, tensor_to_bytes(array))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
