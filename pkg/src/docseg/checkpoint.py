"""Binary checkpoint format for named float32 tensors.

Layout (little-endian throughout):

    magic   4 bytes  b"DSEG"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u32, name utf-8 bytes,
        rank u32, dims u32 * rank,
        raw float32 data (row-major)
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DSEG"
VERSION = 1


class CheckpointError(IOError):
    """Malformed or truncated checkpoint file."""


def save_checkpoint(path, tensors):
    """Write an ordered ``{name: array}`` mapping to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered ``{name: float32 array}``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    tensors = {}
    offset = 12
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt tensor record") from exc
        tensors[name] = data.reshape(dims).copy()
    return tensors
