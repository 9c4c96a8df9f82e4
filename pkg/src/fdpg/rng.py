"""Counter-based random streams keyed by (master seed, purpose, step).

Each (seed, purpose, step) triple owns an independent Philox stream whose
draws are consumed at fixed per-sample counter positions, so results do not
depend on execution order or worker count.
"""

from __future__ import annotations

import numpy as np

# Purpose channels keep training, evaluation and auxiliary draws independent.
TRAIN = 0
EVAL = 1
CONTEXT = 2
AUX = 3

_MASK = (1 << 64) - 1


def stream(master_seed: int, purpose: int, step: int = 0) -> np.random.Generator:
    key = ((master_seed & _MASK) << 64) | ((purpose & 0xFFFF) << 48) | (step & 0xFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))
