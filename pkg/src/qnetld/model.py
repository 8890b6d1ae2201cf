"""Network specifications, jump directions and state-dependent intensities.

Two families are supported: Jackson networks (exogenous arrivals, single
exponential servers, Markovian routing with exit column 0) and
processor-sharing networks (classes sharing capacity in fixed fractions
among the busy classes).  Node indices are 0-based throughout the package.
"""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.sparse.csgraph import connected_components

Direction = tuple  # tuple of ints, e.g. (1, 0) or (-1, 1)

ROW_TOL = 1e-12
FACET_TOL = 1e-12


class SpecError(ValueError):
    """Malformed network specification."""


@dataclass(frozen=True)
class JacksonSpec:
    a: tuple
    sigma: tuple
    routing: tuple  # N rows of N+1 entries; column 0 is the exit probability

    @property
    def N(self) -> int:
        return len(self.a)

    def p(self, i: int, j: int) -> float:
        """Routing probability from node i to node j (0-based)."""
        return self.routing[i][j + 1]

    def p_exit(self, i: int) -> float:
        return self.routing[i][0]


@dataclass(frozen=True)
class ProcessorSharingSpec:
    a: tuple
    sigma: tuple
    f: tuple

    @property
    def N(self) -> int:
        return len(self.a)


NetworkSpec = Union[JacksonSpec, ProcessorSharingSpec]


def jackson(a, sigma, routing) -> JacksonSpec:
    return JacksonSpec(tuple(float(x) for x in a), tuple(float(x) for x in sigma),
                       tuple(tuple(float(x) for x in row) for row in routing))


def processor_sharing(a, sigma, f) -> ProcessorSharingSpec:
    return ProcessorSharingSpec(tuple(float(x) for x in a), tuple(float(x) for x in sigma),
                                tuple(float(x) for x in f))


def unit(N: int, i: int, sign: int = 1) -> Direction:
    v = [0] * N
    v[i] = sign
    return tuple(v)


def transfer(N: int, i: int, j: int) -> Direction:
    """e_j - e_i: one customer moves from node i to node j."""
    v = [0] * N
    v[i] = -1
    v[j] = 1
    return tuple(v)


def jump_directions(spec: NetworkSpec) -> list:
    """Directions with a positive rate somewhere, in lexicographic order."""
    N = spec.N
    dirs = set()
    if isinstance(spec, ProcessorSharingSpec):
        for i in range(N):
            dirs.add(unit(N, i, 1))
            dirs.add(unit(N, i, -1))
    else:
        for i in range(N):
            if spec.a[i] > 0:
                dirs.add(unit(N, i, 1))
            if spec.p_exit(i) > 0:
                dirs.add(unit(N, i, -1))
            for j in range(N):
                if j != i and spec.p(i, j) > 0:
                    dirs.add(transfer(N, i, j))
    return sorted(dirs)


def direction_source(v: Direction):
    """Node whose server produces the jump v, or None for an arrival."""
    neg = [i for i, x in enumerate(v) if x < 0]
    return neg[0] if neg else None


def _check_state(x) -> np.ndarray:
    x = np.asarray(x)
    if np.any(x < 0):
        raise ValueError(f"state {x.tolist()} has negative entries")
    return x


def facet_index(x, K=None) -> tuple:
    """Indices i in K with x_i = 0 (exact for integers, 1e-12 for reals)."""
    x = np.asarray(x)
    if K is None:
        K = range(len(x))
    if np.issubdtype(x.dtype, np.integer):
        return tuple(i for i in sorted(K) if x[i] == 0)
    return tuple(i for i in sorted(K) if abs(x[i]) <= FACET_TOL)


def facet_rate(spec: NetworkSpec, I, v: Direction) -> float:
    """Rate of direction v on the facet where exactly the nodes in I are empty."""
    N = spec.N
    I = set(I)
    nz = [(i, s) for i, s in enumerate(v) if s != 0]
    if isinstance(spec, ProcessorSharingSpec):
        if len(nz) != 1:
            return 0.0
        i, s = nz[0]
        if s == 1:
            return spec.a[i]
        if s == -1 and i not in I:
            f_busy = sum(spec.f[j] for j in range(N) if j not in I)
            return spec.sigma[i] * spec.f[i] / f_busy
        return 0.0
    if len(nz) == 1:
        i, s = nz[0]
        if s == 1:
            return spec.a[i]
        if s == -1 and i not in I:
            return spec.sigma[i] * spec.p_exit(i)
        return 0.0
    if len(nz) == 2 and sorted(s for _, s in nz) == [-1, 1]:
        i = next(k for k, s in nz if s == -1)
        j = next(k for k, s in nz if s == 1)
        if i not in I:
            return spec.sigma[i] * spec.p(i, j)
    return 0.0


def intensity(spec: NetworkSpec, x, v: Direction) -> float:
    """Jump rate r(x, v) of the unscaled network at integer state x."""
    x = _check_state(x)
    if np.any(x + np.asarray(v) < 0):
        return 0.0
    return facet_rate(spec, facet_index(x), v)


def validate(spec: NetworkSpec) -> list:
    """List of violated invariants; an empty list means the spec is valid."""
    out = []
    N = len(spec.a)
    if N == 0:
        return ["network has no nodes"]
    if len(spec.sigma) != N:
        out.append("sigma length does not match a")
        return out
    if any(not np.isfinite(x) for x in spec.a + spec.sigma):
        out.append("non-finite rate")
        return out
    if any(s <= 0 for s in spec.sigma):
        out.append("service rates must be positive")
    if isinstance(spec, ProcessorSharingSpec):
        if len(spec.f) != N:
            out.append("f length does not match a")
            return out
        if any(x <= 0 for x in spec.a):
            out.append("processor sharing needs every arrival rate positive")
        if any(x <= 0 for x in spec.f):
            out.append("capacity fractions f must be positive")
        if abs(sum(spec.f) - 1.0) > ROW_TOL:
            out.append("f does not sum to 1")
    else:
        P = np.asarray(spec.routing, dtype=float)
        if P.shape != (N, N + 1):
            out.append(f"routing must be {N}x{N + 1} (exit column first)")
            return out
        if np.any(P < 0):
            out.append("routing probabilities must be nonnegative")
        for i, s in enumerate(P.sum(axis=1)):
            if abs(s - 1.0) > ROW_TOL:
                out.append(f"routing row {i} does not sum to 1")
        if any(x < 0 for x in spec.a):
            out.append("arrival rates must be nonnegative")
        if not any(x > 0 for x in spec.a):
            out.append("no node with positive exogenous arrivals")
        if not np.any(P[:, 0] > 0):
            out.append("no exit node")
        if not is_irreducible(P[:, 1:]):
            out.append("routing fails irreducibility (not strongly connected)")
    if not out:
        out.extend(_sample_condition1(spec))
    return out


def is_irreducible(R) -> bool:
    R = np.asarray(R)
    if R.shape[0] == 1:
        return True
    n, _ = connected_components((R > 0).astype(int), directed=True, connection="strong")
    return n == 1


def _sample_condition1(spec: NetworkSpec) -> list:
    """Rates must depend on the state only through its empty set and be finitely supported."""
    N = spec.N
    if N > 10:
        return []
    V = jump_directions(spec)
    out = []
    for r in range(N + 1):
        for I in itertools.combinations(range(N), r):
            states = []
            for level in (1, 2, 7):
                x = np.array([0 if i in I else level + i for i in range(N)])
                states.append(x)
            rates = [[intensity(spec, x, v) for v in V] for x in states]
            if not np.allclose(rates[0], rates[1], rtol=0, atol=1e-14) or \
                    not np.allclose(rates[0], rates[2], rtol=0, atol=1e-14):
                out.append(f"rates vary within facet {I}")
            if not all(np.isfinite(rates[0])):
                out.append(f"non-finite rate on facet {I}")
    return out


@dataclass
class Communication:
    reachable: bool
    length: int
    path: list
    failing_step: tuple | None = None


def _shortest_chain(adj, start, targets):
    """BFS path start -> some target along adj (list of successor lists)."""
    targets = set(targets)
    prev = {start: None}
    q = deque([start])
    while q:
        u = q.popleft()
        if u in targets:
            path = [u]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1]
        for w in adj[u]:
            if w not in prev:
                prev[w] = u
                q.append(w)
    return None


def routing_graph(spec: JacksonSpec) -> list:
    N = spec.N
    return [[j for j in range(N) if j != i and spec.p(i, j) > 0] for i in range(N)]


def check_communication(spec: NetworkSpec, x, y) -> Communication:
    """Build an explicit positive-rate jump sequence from x to y."""
    x = _check_state(np.asarray(x, dtype=int)).copy()
    y = _check_state(np.asarray(y, dtype=int))
    N = spec.N
    moves = []
    if isinstance(spec, ProcessorSharingSpec):
        for i in range(N):
            moves += [unit(N, i, -1)] * max(x[i] - y[i], 0)
        for i in range(N):
            moves += [unit(N, i, 1)] * max(y[i] - x[i], 0)
    else:
        adj = routing_graph(spec)
        arrivals = [i for i in range(N) if spec.a[i] > 0]
        exits = [i for i in range(N) if spec.p_exit(i) > 0]
        z = x.copy()
        excess = int(y.sum() - x.sum())
        if excess > 0:
            short = [i for i in arrivals if y[i] > x[i]]
            j = short[0] if short else arrivals[0]
            moves += [unit(N, j, 1)] * excess
            z[j] += excess
        target = y.copy()
        if excess < 0:
            over = [i for i in exits if x[i] > y[i]]
            k = over[0] if over else exits[0]
            target[k] += -excess
        # move customers one at a time along routing chains
        while np.any(z != target):
            i = int(np.flatnonzero(z > target)[0])
            j = int(np.flatnonzero(z < target)[0])
            chain = _shortest_chain(adj, i, [j])
            if chain is None:
                return Communication(False, len(moves), moves, (i, j))
            for s, t in zip(chain[:-1], chain[1:]):
                moves.append(transfer(N, s, t))
            z[i] -= 1
            z[j] += 1
        if excess < 0:
            moves += [unit(N, k, -1)] * (-excess)
    # replay and verify every step has positive intensity
    state = x.copy()
    for m, v in enumerate(moves):
        if intensity(spec, state, v) <= 0:
            return Communication(False, m, moves, (tuple(state.tolist()), v))
        state = state + np.asarray(v)
    ok = bool(np.all(state == y))
    bound = (N + 1) * int(np.abs(x - y).sum())
    if ok and len(moves) > bound:
        raise AssertionError(f"connecting sequence of length {len(moves)} exceeds {bound}")
    return Communication(ok, len(moves), moves, None if ok else (tuple(state.tolist()), None))


# --- serialization -------------------------------------------------------

def spec_from_dict(d: dict) -> NetworkSpec:
    try:
        kind = d["type"]
        if kind == "jackson":
            return jackson(d["a"], d["sigma"], d["routing"])
        if kind == "processor_sharing":
            return processor_sharing(d["a"], d["sigma"], d["f"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"malformed network spec: {exc!r}") from exc
    raise SpecError(f"unknown network type {d.get('type')!r}")


def spec_to_dict(spec: NetworkSpec) -> dict:
    if isinstance(spec, JacksonSpec):
        return {"type": "jackson", "a": list(spec.a), "sigma": list(spec.sigma),
                "routing": [list(r) for r in spec.routing]}
    return {"type": "processor_sharing", "a": list(spec.a), "sigma": list(spec.sigma),
            "f": list(spec.f)}


FIXTURES = ("J1", "J1s", "J2", "J2u", "J3", "P2", "P2u")


def load_fixture(name: str) -> NetworkSpec:
    text = resources.files("qnetld").joinpath("data", f"{name}.json").read_text()
    return spec_from_dict(json.loads(text))


def load_spec(path) -> NetworkSpec:
    """Read a spec from a JSON file; bare fixture names (e.g. "J2") are also accepted."""
    p = Path(path)
    if not p.exists() and str(path) in FIXTURES:
        return load_fixture(str(path))
    with open(p) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise SpecError(f"{path}: expected a JSON object")
    return spec_from_dict(d)


def as_index_set(K: Sequence[int] | None, N: int) -> tuple:
    K = tuple(sorted(set(int(k) for k in (K or ()))))
    if any(k < 0 or k >= N for k in K):
        raise ValueError(f"index set {K} not within 0..{N - 1}")
    return K
