"""Top-P% selection of global-weight changes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .nn import DTYPE


@dataclass(frozen=True, eq=False)
class SparseDelta:
    """Changes for a subset of global coordinates, indices ascending."""

    round: int
    global_count: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.uint32)
        vals = np.asarray(self.values, dtype=DTYPE)
        if idx.ndim != 1 or idx.shape != vals.shape:
            raise ValueError(f"indices {idx.shape} and values {vals.shape} must be equal-length 1-D arrays")
        if idx.size and (np.any(np.diff(idx.astype(np.int64)) <= 0) or int(idx[-1]) >= self.global_count):
            raise ValueError("indices must be strictly increasing and below global_count")
        if not np.all(np.isfinite(vals)):
            raise ValueError("delta values must be finite")
        if not (0 <= self.round < 2**32 and 0 <= self.global_count < 2**32):
            raise ValueError("round and global_count must fit in u32")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other):
        # bitwise value comparison so that -0.0 != 0.0 round-trips are caught
        return (
            isinstance(other, SparseDelta)
            and self.round == other.round
            and self.global_count == other.global_count
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
        )

    __hash__ = None

    def dense(self) -> np.ndarray:
        out = np.zeros(self.global_count, dtype=DTYPE)
        out[self.indices] = self.values
        return out


def selection_size(P: float, n: int) -> int:
    """ceil(P/100 * n) in exact arithmetic."""
    if not 0 < P <= 100:
        raise ValueError(f"P must be in (0, 100], got {P}")
    return min(n, math.ceil(Fraction(P) * n / 100))


def top_p_select(g_before: np.ndarray, g_after: np.ndarray, P: float, round: int = 0) -> SparseDelta:
    """Keep the ``ceil(P% * n)`` coordinates with the largest absolute change.

    Ties on ``|change|`` go to the lower index.
    """
    g_before = np.asarray(g_before)
    g_after = np.asarray(g_after)
    if g_before.shape != g_after.shape or g_before.ndim != 1:
        raise ValueError(f"length mismatch: {g_before.shape} vs {g_after.shape}")
    n = g_before.size
    m = selection_size(P, n)
    diff = (g_after.astype(DTYPE) - g_before.astype(DTYPE)).astype(DTYPE)
    if m == n:
        idx = np.arange(n)
    elif m == 0:
        idx = np.zeros(0, dtype=np.int64)
    else:
        mag = np.abs(diff)
        kth = np.partition(mag, n - m)[n - m]
        above = np.flatnonzero(mag > kth)
        at = np.flatnonzero(mag == kth)[: m - above.size]
        idx = np.sort(np.concatenate([above, at]))
    return SparseDelta(round, n, idx, diff[idx])


def apply_delta(g: np.ndarray, delta: SparseDelta, scale: float = 1.0) -> np.ndarray:
    """``g`` with ``scale * value`` added at each delta coordinate."""
    if g.shape != (delta.global_count,):
        raise ValueError(f"delta is for {delta.global_count} coordinates, vector has {g.shape}")
    out = g.copy()
    out[delta.indices] = out[delta.indices] + DTYPE(scale) * delta.values
    return out
