"""Counter-based seed splitting: one master seed fans out to named streams."""
from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def derive_seed(master: int, *path) -> int:
    """Deterministic 63-bit seed for the stream addressed by ``path``."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key(p) for p in path))
    hi, lo = ss.generate_state(2)
    return int((int(hi) << 32 | int(lo)) & ((1 << 63) - 1))


def generator(master: int, *path) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(master, *path))
