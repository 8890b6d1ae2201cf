"""Local models: the network with only the constraints in K enforced.

A local model keeps the nonnegativity constraints x_i >= 0 for i in K and
drops the rest.  Its rates depend on the state only through the set
I = {i in K : x_i = 0}, so the whole generator fits in a table indexed by
(I, v) with I encoded as a bitmask over K (bit b <-> K[b]).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .model import (JacksonSpec, NetworkSpec, ProcessorSharingSpec, as_index_set,
                    direction_source, facet_rate, intensity, jump_directions)

MAX_K = 12
REP_LEVEL = 3


@dataclass(frozen=True, eq=False)
class LocalModel:
    spec: NetworkSpec
    K: tuple
    V: tuple
    table: np.ndarray = field(repr=False)  # shape (2**len(K), len(V))

    @property
    def N(self) -> int:
        return self.spec.N

    @property
    def dirs(self) -> np.ndarray:
        return np.array(self.V, dtype=float).reshape(len(self.V), self.N)

    @property
    def n_facets(self) -> int:
        return 1 << len(self.K)

    def mask(self, I) -> int:
        m = 0
        for i in I:
            m |= 1 << self.K.index(i)
        return m

    def facet(self, mask: int) -> tuple:
        return tuple(k for b, k in enumerate(self.K) if mask >> b & 1)

    def facets(self):
        return [self.facet(m) for m in range(self.n_facets)]

    def rate(self, I, v) -> float:
        return float(self.table[self.mask(I), self.V.index(tuple(v))])

    def interior_rates(self) -> np.ndarray:
        return self.table[0]

    def tilt(self, c) -> np.ndarray:
        return tilt_array(self.V, c)


def tilt_array(V, c) -> np.ndarray:
    """Tilt multipliers aligned with V from a scalar, a sequence or a {v: c_v} mapping."""
    if c is None:
        return np.ones(len(V))
    if np.isscalar(c):
        return np.full(len(V), float(c))
    if isinstance(c, dict):
        missing = [v for v in V if tuple(v) not in c]
        if missing:
            raise ValueError(f"tilt missing directions {missing}")
        extra = set(map(tuple, c)) - set(map(tuple, V))
        if extra:
            raise ValueError(f"tilt has unknown directions {sorted(extra)}")
        return np.array([float(c[tuple(v)]) for v in V])
    arr = np.asarray(c, dtype=float)
    if arr.shape != (len(V),):
        raise ValueError(f"tilt has shape {arr.shape}, expected ({len(V)},)")
    return arr


def tilt_dict(V, c) -> dict:
    return {tuple(v): float(x) for v, x in zip(V, tilt_array(V, c))}


def closed_form_table(spec: NetworkSpec, K, V) -> np.ndarray:
    table = np.zeros((1 << len(K), len(V)))
    for m in range(1 << len(K)):
        I = [k for b, k in enumerate(K) if m >> b & 1]
        for j, v in enumerate(V):
            table[m, j] = facet_rate(spec, I, v)
    return table


def localize(spec: NetworkSpec, K=()) -> LocalModel:
    """Local model at index set K, built by evaluating rates at representative states."""
    return _localize(spec, as_index_set(K, spec.N))


@lru_cache(maxsize=256)
def _localize(spec: NetworkSpec, K: tuple) -> LocalModel:
    if len(K) > MAX_K:
        raise ValueError(f"|K| = {len(K)} exceeds the supported maximum {MAX_K}")
    V = tuple(jump_directions(spec))
    table = np.zeros((1 << len(K), len(V)))
    for m in range(1 << len(K)):
        x = np.full(spec.N, REP_LEVEL, dtype=int)
        for b, k in enumerate(K):
            if m >> b & 1:
                x[k] = 0
        for j, v in enumerate(V):
            table[m, j] = intensity(spec, x, v)
    expected = closed_form_table(spec, K, V)
    if not np.allclose(table, expected, rtol=1e-14, atol=0):
        raise AssertionError("representative-state rates disagree with the closed forms")
    base = table[0]
    if np.any(table[:, base == 0] != 0):
        raise AssertionError("a rate appears on a boundary facet that is absent in the interior")
    table.setflags(write=False)
    return LocalModel(spec, K, V, table)


def lln_drift(model: LocalModel, c=1.0) -> np.ndarray:
    """Interior velocity sum_v c_v r_{0,v} v."""
    return model.dirs.T @ (model.tilt(c) * model.table[0])


def facet_drift_gap(model: LocalModel, I, c=1.0) -> np.ndarray:
    """sum_v c_v (r_{I,v} - r_{0,v}) v: velocity lost on facet I relative to the interior."""
    m = model.mask(I)
    return model.dirs.T @ (model.tilt(c) * (model.table[m] - model.table[0]))


def source_index(model: LocalModel) -> np.ndarray:
    """For each direction, the node whose server emits it (-1 for arrivals)."""
    return np.array([-1 if (s := direction_source(v)) is None else s for v in model.V])


def is_jackson(model: LocalModel) -> bool:
    return isinstance(model.spec, JacksonSpec)


def is_ps(model: LocalModel) -> bool:
    return isinstance(model.spec, ProcessorSharingSpec)
