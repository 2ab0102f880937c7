"""Seed derivation.

All randomness comes from one root seed. A stream is identified by the
root seed plus a tuple of small integers (its spawn key); the generator
for that stream is Philox4x64-10, a counter-based bit generator, keyed by
``numpy.random.SeedSequence(root, spawn_key=key)``. Streams never share
state, so scenes, splits and shuffles can be generated in any order.
"""

from __future__ import annotations

import numpy as np

# stream identifiers (first element of the spawn key)
SCENE = 1
SENSOR = 2
SPLIT = 3
SHUFFLE = 4
INIT = 5
SHIFT = 6


def generator(root_seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(root_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
