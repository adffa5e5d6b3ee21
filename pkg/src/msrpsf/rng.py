"""Counter-based random streams keyed by experiment coordinates.

Every stream is a Philox generator whose key is derived from the master seed
and a tuple of integers such as ``(trial, band, stage)``, so results never
depend on the order in which streams are created or consumed.
"""

from __future__ import annotations

import numpy as np

# Stage tags used as the last key component.
SCENE = 0
NOISE = 1


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
