"""Hierarchical seed derivation.

Every random stream in a run derives from the single top-level seed plus a
label path (e.g. seed, "epoch", 3, "client", 7). Labels hash through CRC32
into a SeedSequence, so adding parallelism or reordering unrelated work
never perturbs an existing stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(p).encode("utf-8")) for p in path]
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, *path))
