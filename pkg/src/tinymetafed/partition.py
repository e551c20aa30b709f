"""Global/local weight partitions.

Global weights travel between server and clients; local weights are rebuilt
on the device every round and never leave it. Partitions are whole-layer:
a layer's weights and biases always share one flag.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .nn import NetworkSpec, ShapeError, TrainMask, check_weights

_LOCAL_LAYERS = re.compile(r"^local_layers\s*=\s*\[([0-9,\s-]*)\]$")


class Part(NamedTuple):
    """Coordinates of a weight vector paired with their values."""

    indices: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class Partition:
    spec: NetworkSpec
    local_layers: tuple[int, ...] = ()
    global_mask: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.spec.layers)
        layers = tuple(sorted(set(int(k) for k in self.local_layers)))
        for k in layers:
            if not -n <= k < n:
                raise ValueError(f"local layer {k} out of range for a {n}-layer network")
        layers = tuple(sorted(set(k % n for k in layers)))
        object.__setattr__(self, "local_layers", layers)
        mask = np.ones(self.spec.param_count, dtype=bool)
        for k in layers:
            mask[self.spec.layer_slice(k)] = False
        mask.setflags(write=False)
        object.__setattr__(self, "global_mask", mask)
        object.__setattr__(self, "_global_idx", np.flatnonzero(mask))
        object.__setattr__(self, "_local_idx", np.flatnonzero(~mask))
        object.__setattr__(self, "_train_global", TrainMask.from_array(self.spec, mask))
        object.__setattr__(self, "_train_local", TrainMask.from_array(self.spec, ~mask))

    @classmethod
    def all_global(cls, spec: NetworkSpec) -> "Partition":
        return cls(spec, ())

    @classmethod
    def last_layer_local(cls, spec: NetworkSpec) -> "Partition":
        return cls(spec, (len(spec.layers) - 1,))

    @classmethod
    def from_policy(cls, spec: NetworkSpec, policy: str) -> "Partition":
        """Parse ``all_global``, ``last_layer_local`` or ``local_layers=[i,j,...]``."""
        text = policy.strip()
        if text == "all_global":
            return cls.all_global(spec)
        if text == "last_layer_local":
            return cls.last_layer_local(spec)
        m = _LOCAL_LAYERS.match(text)
        if m is None:
            raise ValueError(f"unknown partition policy {policy!r}")
        items = [s for s in m.group(1).replace(" ", "").split(",") if s]
        return cls(spec, tuple(int(s) for s in items))

    @property
    def policy(self) -> str:
        if not self.local_layers:
            return "all_global"
        if self.local_layers == (len(self.spec.layers) - 1,):
            return "last_layer_local"
        return "local_layers=[" + ",".join(map(str, self.local_layers)) + "]"

    @property
    def global_count(self) -> int:
        return int(self._global_idx.size)

    @property
    def local_count(self) -> int:
        return int(self._local_idx.size)

    @property
    def global_indices(self) -> np.ndarray:
        return self._global_idx

    @property
    def local_indices(self) -> np.ndarray:
        return self._local_idx

    def train_global(self) -> TrainMask:
        """Gradient mask that freezes the local weights."""
        return self._train_global

    def train_local(self) -> TrainMask:
        """Gradient mask that freezes the global weights."""
        return self._train_local

    def global_values(self, w: np.ndarray) -> np.ndarray:
        check_weights(self.spec, w)
        return w[self._global_idx]

    def local_values(self, w: np.ndarray) -> np.ndarray:
        check_weights(self.spec, w)
        return w[self._local_idx]

    def assemble(self, global_values: np.ndarray, local_values: np.ndarray) -> np.ndarray:
        """Full vector from value arrays ordered like ``global_indices``/``local_indices``."""
        if global_values.shape != (self.global_count,) or local_values.shape != (self.local_count,):
            raise ShapeError(
                f"expected {self.global_count} global and {self.local_count} local values, "
                f"got {global_values.shape} and {local_values.shape}"
            )
        dtype = np.result_type(global_values, local_values)
        w = np.empty(self.spec.param_count, dtype=dtype)
        w[self._global_idx] = global_values
        w[self._local_idx] = local_values
        return w


def split(w: np.ndarray, p: Partition) -> tuple[Part, Part]:
    check_weights(p.spec, w)
    return (
        Part(p.global_indices.copy(), w[p.global_indices]),
        Part(p.local_indices.copy(), w[p.local_indices]),
    )


def merge(global_part: Part, local_part: Part, p: Partition) -> np.ndarray:
    """Inverse of :func:`split`; parts may list their coordinates in any order."""
    n = p.spec.param_count
    g_idx = np.asarray(global_part.indices, dtype=np.int64)
    l_idx = np.asarray(local_part.indices, dtype=np.int64)
    for name, idx, vals in (("global", g_idx, global_part.values), ("local", l_idx, local_part.values)):
        if idx.shape != np.shape(vals):
            raise ShapeError(f"{name} part has {idx.size} indices but {np.size(vals)} values")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError(f"{name} part index out of range [0, {n})")
    if not np.all(p.global_mask[g_idx]) or np.any(p.global_mask[l_idx]):
        raise ValueError("part indices do not respect the partition mask")
    seen = np.bincount(np.concatenate([g_idx, l_idx]), minlength=n)
    if np.any(seen > 1):
        raise ValueError(f"overlapping indices: {np.flatnonzero(seen > 1)[:5].tolist()}")
    if np.any(seen == 0):
        raise ValueError(f"missing indices: {np.flatnonzero(seen == 0)[:5].tolist()}")
    dtype = np.result_type(global_part.values, local_part.values)
    w = np.empty(n, dtype=dtype)
    w[g_idx] = global_part.values
    w[l_idx] = local_part.values
    return w
