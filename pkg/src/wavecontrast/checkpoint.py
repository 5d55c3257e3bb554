"""Binary checkpoint serialization for named parameter tensors.

Layout, all little-endian:

    magic "SCNCKPT1"
    u32 tensor count
    per tensor: u16 name_len, name bytes (UTF-8), u8 ndim,
                u32 per dimension, f32 data (row-major)
    footer: u16 hash_len, architecture hash bytes (UTF-8), u64 step

Round-trips are bit-exact: data is stored and restored as raw f32.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

CHECKPOINT_MAGIC = b"SCNCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: Dict[str, np.ndarray], arch_hash: str, step: int = 0) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"too many dimensions for {name!r}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    hash_bytes = arch_hash.encode("utf-8")
    parts.append(struct.pack("<H", len(hash_bytes)))
    parts.append(hash_bytes)
    parts.append(struct.pack("<Q", step))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], str, int]:
    path = Path(path)
    buf = path.read_bytes()
    view = memoryview(buf)
    off = 0

    def take(n: int, what: str):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"{path.name}: truncated while reading {what}")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(8, "magic")) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path.name}: bad magic, not a checkpoint")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    state: Dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = bytes(take(name_len, f"tensor {i} name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{name!r} ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name!r} shape"))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * size, f"{name!r} data"), dtype="<f4")
        if name in state:
            raise CheckpointError(f"{path.name}: duplicate tensor {name!r}")
        state[name] = data.reshape(shape).copy()
    (hash_len,) = struct.unpack("<H", take(2, "hash length"))
    arch_hash = bytes(take(hash_len, "architecture hash")).decode("utf-8")
    (step,) = struct.unpack("<Q", take(8, "step counter"))
    if off != len(buf):
        raise CheckpointError(f"{path.name}: {len(buf) - off} trailing bytes")
    return state, arch_hash, step
