"""Seeded random streams.

Every draw goes through numpy's PCG64 bit generator seeded from a
``SeedSequence``; independent streams are derived by appending integer keys
to the root seed (``stream(seed, 2, t)``), so results do not depend on the
order in which streams are consumed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALGORITHM = "numpy.random.PCG64 via SeedSequence"

# stream keys
MODEL_INIT = 0
SHUFFLE = 1
ADD_DOMAIN = 2


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), *keys])))


@dataclass(frozen=True)
class RngState:
    seed: int
    algorithm: str = ALGORITHM

    def generator(self, *keys: int) -> np.random.Generator:
        return stream(self.seed, *keys)
