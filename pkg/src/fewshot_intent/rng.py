"""Seeded, splittable random streams.

Every random draw in the package goes through :func:`stream`, which derives an
independent PCG64 generator from a root seed and a path of integer keys.  Two
calls with the same arguments yield the same sequence on every platform.
"""
from __future__ import annotations

import numpy as np

from .errors import InputError

# stable integer tags so streams for different purposes never collide
SYNTH = 1
SPLIT = 2
EPISODE = 3
ENCODER_INIT = 4
WORKER_INIT = 5
TRAIN = 6
EVAL = 7
BENCH = 8


def stream(seed: int, *keys: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise InputError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))

