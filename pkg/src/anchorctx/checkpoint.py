"""Binary parameter checkpoints.

Layout: the ASCII magic ``ACTK1`` followed by one record per parameter::

    u64 name_length | name bytes (utf-8) | u64 rank | u64 dims[rank] | f64 data[prod(dims)]

All integers and floats are little-endian.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DatasetParseError

MAGIC = b"ACTK1"
_U64 = struct.Struct("<Q")


def save_checkpoint(path: str | os.PathLike, params: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, value in params.items():
        if not isinstance(value, np.ndarray):
            value = getattr(value, "data", value)  # unwrap Tensor
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(arr.ndim))
        chunks.extend(_U64.pack(d) for d in arr.shape)
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise DatasetParseError(f"{path}: bad checkpoint magic")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DatasetParseError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = _U64.unpack(take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = _U64.unpack(take(8))
        dims = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    return out
