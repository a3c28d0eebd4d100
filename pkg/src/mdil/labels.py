"""Union label space used by single-head models."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from mdil.data import IGNORE_ID


class UnionLabelSpace:
    """Global class registry; classes are appended in first-seen order."""

    def __init__(self, classes: Sequence[str] = ()):
        self.names: list[str] = []
        self.extend(classes)

    def extend(self, classes: Sequence[str]) -> list[str]:
        new = [c for c in classes if c not in self.names]
        self.names.extend(new)
        return new

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def table(self, classes: Sequence[str]) -> np.ndarray:
        """Local id -> global id for a domain whose classes are all registered."""
        missing = [c for c in classes if c not in self.names]
        if missing:
            raise KeyError(f"classes {missing} are not in the union label space")
        return np.array([self.names.index(c) for c in classes], dtype=np.int64)


def remap_labels(labels, source: Sequence[str], target: UnionLabelSpace,
                 inverse: bool = False) -> np.ndarray:
    """Map a label map between a domain's local ids and union ids; 255 is preserved.

    With ``inverse=True`` the map goes from union ids back to local ids, and a
    union id outside the domain's classes is an error.
    """
    labels = np.asarray(labels)
    fwd = target.table(source)
    lut = np.full(256, -1, dtype=np.int64)
    if inverse:
        lut[fwd] = np.arange(len(source))
    else:
        lut[:len(source)] = fwd
    lut[IGNORE_ID] = IGNORE_ID
    if labels.size and (labels.min() < 0 or labels.max() >= len(lut)):
        raise ValueError("label value out of range")
    out = lut[labels]
    if (out < 0).any():
        bad = int(labels[out < 0].ravel()[0])
        raise ValueError(f"label {bad} has no counterpart in the target space")
    return out
