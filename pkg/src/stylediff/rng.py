"""Seeded counter-based random number generation.

Every stochastic component draws from a Philox generator derived from an
integer seed plus a stream key, so any draw can be reproduced in isolation
(no global RNG state anywhere in the package). Stream keys are small tuples
of ints and/or strings, e.g. ``("train", stage, iteration)``.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for `seed` and a stream key; identical args, identical draws."""
    spawn_key = tuple(_key_part(p) for p in stream)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seq))
