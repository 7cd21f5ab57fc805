"""Labeled random streams.

Every random draw in the package comes from a counter-based Philox generator
keyed by ``(seed, label, index...)`` through :class:`numpy.random.SeedSequence`
spawn keys.  A stream is therefore a pure function of its key, so results do
not depend on how work is split across workers or on call order.
"""
from __future__ import annotations

import numpy as np

# stream labels; never renumber, checkpoints depend on them
INIT = 1
NOISE = 2
SHUFFLE = 3
TIME = 4
DATAGEN = 5
EVAL = 6
ORACLE = 7


def stream(seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))
