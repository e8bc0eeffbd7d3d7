"""Binary tensor blobs: little-endian int64 rank, int64 dims, then float64 data."""
from __future__ import annotations

import io
import struct

import numpy as np


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    header = struct.pack("<q", arr.ndim) + struct.pack(f"<{arr.ndim}q", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_stream(buf: io.BufferedIOBase) -> np.ndarray:
    raw = buf.read(8)
    if len(raw) != 8:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<q", raw)
    if rank < 0 or rank > 16:
        raise ValueError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}q", buf.read(8 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = buf.read(8 * count)
    if len(payload) != 8 * count:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return tensor_from_stream(io.BytesIO(blob))


def tensors_to_bytes(arrays) -> bytes:
    return b"".join(tensor_to_bytes(a) for a in arrays)


def tensors_from_bytes(blob: bytes) -> list[np.ndarray]:
    buf = io.BytesIO(blob)
    out = []
    while buf.tell() < len(blob):
        out.append(tensor_from_stream(buf))
    return out
