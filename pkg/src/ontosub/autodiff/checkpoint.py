"""Binary parameter checkpoints.

Layout (little-endian): ``u32 count`` then, per tensor,
``u16 name_len | name (utf-8) | u8 rank | u64 dims[rank] | f64 data[prod(dims)]``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    out: dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<I", buf, 0)
        pos = 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(buf):
                raise CheckpointError(f"truncated tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return out
