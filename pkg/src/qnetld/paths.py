"""Piecewise-linear paths in the orthant and their rate J(phi) = int L(phi, phi') dt."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import FACET_TOL, NetworkSpec, facet_index
from .rates import local_rate

MIN_SEGMENT = 1e-12


@dataclass(frozen=True)
class PiecewisePath:
    t: np.ndarray  # breakpoints, t[0] = 0 < ... < t[-1]
    x: np.ndarray  # shape (len(t), N)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if t.ndim != 1 or len(t) < 2 or x.shape[0] != len(t):
            raise ValueError("need at least two breakpoints with one value each")
        if t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ValueError("breakpoints must start at 0 and increase strictly")
        if not np.all(np.isfinite(x)):
            raise ValueError("path values must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)

    @classmethod
    def from_pairs(cls, pairs):
        """Build from [[t, [x...]], ...] as read from a path file."""
        t = [float(p[0]) for p in pairs]
        x = [np.atleast_1d(np.asarray(p[1], dtype=float)) for p in pairs]
        return cls(np.array(t), np.array(x))

    @classmethod
    def linear(cls, x0, beta, T=1.0):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return cls(np.array([0.0, T]), np.array([x0, x0 + T * np.asarray(beta, dtype=float)]))

    @property
    def N(self) -> int:
        return self.x.shape[1]

    @property
    def T(self) -> float:
        return float(self.t[-1])

    def slopes(self) -> np.ndarray:
        return np.diff(self.x, axis=0) / np.diff(self.t)[:, None]

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return np.stack([np.interp(s, self.t, self.x[:, i]) for i in range(self.N)], axis=-1)

    def to_pairs(self) -> list:
        return [[float(t), [float(v) for v in x]] for t, x in zip(self.t, self.x)]


@dataclass
class Segment:
    t0: float
    t1: float
    K: tuple
    beta: np.ndarray
    value: float  # L on the segment (rate per unit time)

    @property
    def cost(self) -> float:
        dt = self.t1 - self.t0
        return math.inf if math.isinf(self.value) else self.value * dt


@dataclass
class PathRate:
    value: float
    segments: list


def refine(phi: PiecewisePath) -> list:
    """Split each segment at the times a coordinate reaches or leaves zero."""
    pieces = []
    for k in range(len(phi.t) - 1):
        t0, t1 = phi.t[k], phi.t[k + 1]
        x0, x1 = phi.x[k], phi.x[k + 1]
        cuts = {t0, t1}
        for i in range(phi.N):
            a, b = x0[i], x1[i]
            # a linear coordinate crosses zero at most once on the open segment
            if (a > FACET_TOL and b < -FACET_TOL) or (a < -FACET_TOL and b > FACET_TOL):
                cuts.add(t0 + (t1 - t0) * a / (a - b))
        times = sorted(cuts)
        for s0, s1 in zip(times[:-1], times[1:]):
            if s1 - s0 > MIN_SEGMENT:
                pieces.append((s0, s1))
    return pieces


def path_rate(spec: NetworkSpec, phi: PiecewisePath) -> PathRate:
    """Sum of L(facet, slope) times duration over the zero-crossing refinement of phi."""
    if np.any(phi.x < -FACET_TOL):
        raise ValueError("path leaves the orthant")
    segments = []
    total = 0.0
    for s0, s1 in refine(phi):
        y0, y1 = phi(s0), phi(s1)
        beta = (y1 - y0) / (s1 - s0)
        # on the open segment a coordinate is zero only if it vanishes at both ends
        K = tuple(i for i in facet_index(np.maximum(y0, 0.0)) if abs(y1[i]) <= FACET_TOL)
        for i in K:
            beta[i] = 0.0
        value = local_rate(spec, K, beta).value
        seg = Segment(float(s0), float(s1), K, beta, value)
        segments.append(seg)
        total += seg.cost
    return PathRate(total, segments)
