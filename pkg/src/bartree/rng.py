"""Seed derivation and counter-based streams.

Every random draw in the package flows from one 64-bit master seed.
Sub-seeds are derived with the splitmix64 finalizer:

    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
    z = z ^ (z >> 31)

Replicate ``r`` of a campaign uses ``mix(master_seed, r)``. Inside one tree,
the noise of generation ``g`` comes from a Philox stream keyed by
``mix(tree_seed, g)``, with draws laid out in increasing label order, so
the value at a label never depends on how the work is scheduled.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# stream index reserved for the random initial states
INIT_STREAM = MASK64


def mix(seed: int, index: int) -> int:
    z = (int(seed) + (int(index) + 1) * _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def replicate_seed(master_seed: int, r: int) -> int:
    return mix(master_seed, r)


def generation_stream(tree_seed: int, generation: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=mix(tree_seed, generation)))


def init_stream(tree_seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=mix(tree_seed, INIT_STREAM)))
