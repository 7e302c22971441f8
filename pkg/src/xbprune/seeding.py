"""Seed splitting: one user seed fans out to independent per-(layer, group) streams.

The derived seed is ``seed XOR crc32("<layer>/<index>/<purpose>")``.  crc32 is
used instead of ``hash()`` because it is stable across interpreter runs.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, layer: str, index: int = 0, purpose: str = "lgd") -> int:
    return (int(seed) & 0xFFFFFFFFFFFFFFFF) ^ zlib.crc32(f"{layer}/{index}/{purpose}".encode())


def rng_for(seed: int, layer: str, index: int = 0, purpose: str = "lgd") -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, layer, index, purpose))
