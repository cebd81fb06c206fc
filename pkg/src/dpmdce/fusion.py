"""Average-pool selected layer vectors to a common width and merge them.

The merge weight for the vector i layers before the last one is a**i, so with
base a > 1 the EARLIER selected layers get the larger weights. That follows
the weighting formula literally; the conventional naming of the strategies
("strengthening" toward the front) pulls the other way, so treat the names as
labels for the base value, nothing more.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRESET_BASES = {"weakening": 0.5, "balanced": 1.0, "strengthening": 2.0}


@dataclass
class FusionConfig:
    weight_base: float = 1.0  # a
    common_width: int | None = None  # V; None = min width of the merged vectors

    def __post_init__(self):
        if self.weight_base <= 0:
            raise ValueError("weight base must be positive")

    @property
    def strategy(self) -> str:
        if self.weight_base < 1.0:
            return "weakening"
        if self.weight_base == 1.0:
            return "balanced"
        return "strengthening"


def pool_to_common(vec, v: int) -> np.ndarray:
    """Block-mean a vector down to length v; its length must divide evenly."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError("expected a 1-D vector")
    if v <= 0 or vec.size % v:
        raise ValueError(f"length {vec.size} not divisible into {v} blocks")
    return vec.reshape(v, vec.size // v).mean(axis=1)


def merge_weighted(pooled, weight_base: float) -> np.ndarray:
    """(1/T) * sum of a**i times the i-th vector counting BACK from the last.

    ``pooled`` is ordered front to back, so pooled[-1] carries weight a**0.
    """
    if not len(pooled):
        raise ValueError("nothing to merge")
    vecs = [np.asarray(p, dtype=np.float64) for p in pooled]
    width = vecs[0].size
    if any(v.size != width for v in vecs):
        raise ValueError("pooled vectors must share one width")
    t = len(vecs)
    out = np.zeros(width)
    for i, vec in enumerate(reversed(vecs)):
        out += weight_base**i * vec
    return out / t


def fuse(vectors, config: FusionConfig) -> np.ndarray:
    """Pool each vector to the common width, then merge."""
    vecs = [np.asarray(v, dtype=np.float64) for v in vectors]
    v = config.common_width or min(x.size for x in vecs)
    return merge_weighted([pool_to_common(x, v) for x in vecs], config.weight_base)
