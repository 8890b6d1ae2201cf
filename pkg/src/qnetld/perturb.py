"""Strictly positive perturbations of tilt solutions and continuity of averaged rates.

A solution of the balance system sum_v rbar_v c_v v = beta may have c_v = 0
for some directions.  perturb_positive returns a nearby solution with every
c_v > 0 and the same beta.  For Jackson networks it adds small flows
around closed chains (arrival, transfers, exit), which sum to zero.  For
processor sharing it moves occupancy mass onto the all-busy facet and
rebalances each coordinate.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .local import LocalModel, is_jackson, source_index, tilt_array, tilt_dict
from .model import routing_graph, transfer, unit
from .rates import (RateSolution, _status, ell, rbar_from, rho_dict, rho_from_tau, rho_vector,
                    tau_from_rho)

RESIDUAL_TOL = 1e-9


def solution_from(model: LocalModel, rho, c, beta=None) -> RateSolution:
    """Assemble a RateSolution from occupancies and tilts; beta defaults to the tilted drift."""
    r = rho_vector(model, rho)
    rbar = rbar_from(model, r)
    cv = tilt_array(model.V, c)
    if np.any(cv < 0):
        raise ValueError("tilts must be nonnegative")
    rb = np.array([rbar[v] for v in model.V])
    drift = model.dirs.T @ (rb * cv)
    beta = drift if beta is None else np.asarray(beta, dtype=float)
    value = float(np.sum(np.where(rb > 0, rb * ell(cv), 0.0)))
    lam = np.full(model.N, np.nan)
    return RateSolution(value, _status(value), beta, model.K, model.V, tilt_dict(model.V, cv),
                        rho_dict(model, r), tau_from_rho(model, r) if is_jackson(model) else
                        r @ _ps_service(model), rbar, lam)


def _ps_service(model: LocalModel) -> np.ndarray:
    """Facet-by-coordinate matrix of departure rates r_{I,-e_i}."""
    T = np.zeros((model.n_facets, model.N))
    for j, v in enumerate(model.V):
        i = int(np.flatnonzero(np.asarray(v))[0])
        if v[i] < 0:
            T[:, i] = model.table[:, j]
    return T


def _bfs_path(adj, start, goal_test):
    prev = {start: None}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        if goal_test(u):
            path = [u]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1]
        for w in adj[u]:
            if w not in prev:
                prev[w] = u
                queue.append(w)
    return None


def closed_chains(spec) -> list:
    """One closed chain of directions through every Jackson direction.

    A chain enters at an arrival node, follows positive routing edges and
    leaves through an exit, so its directions sum to zero.  Paths are
    shortest in the routing digraph and hence self-avoiding.
    """
    N = spec.N
    adj = routing_graph(spec)
    radj = [[i for i in range(N) if j in adj[i]] for j in range(N)]
    entries = {i for i in range(N) if spec.a[i] > 0}
    exits = {i for i in range(N) if spec.p_exit(i) > 0}

    def into(i):  # entry node ... i
        back = _bfs_path(radj, i, lambda u: u in entries)
        return back[::-1]

    def out_of(i):  # i ... exit node
        return _bfs_path(adj, i, lambda u: u in exits)

    def chain(nodes):
        dirs = [unit(N, nodes[0], 1)]
        dirs += [transfer(N, i, j) for i, j in zip(nodes[:-1], nodes[1:])]
        dirs.append(unit(N, nodes[-1], -1))
        return dirs

    chains = []
    for i in sorted(entries | exits):
        chains.append(chain(into(i)[:-1] + out_of(i)))
    for i in range(N):
        for j in adj[i]:
            chains.append(chain(into(i) + out_of(j)))
    for ch in chains:
        if np.any(np.sum(ch, axis=0) != 0):
            raise AssertionError("chain directions do not sum to zero")
    return chains


def chain_counts(model: LocalModel) -> np.ndarray:
    """W_v: number of closed chains using direction v."""
    W = np.zeros(len(model.V))
    for ch in closed_chains(model.spec):
        for v in ch:
            W[model.V.index(v)] += 1
    if np.any(W == 0):
        raise AssertionError("some direction lies on no closed chain")
    return W


def _perturb_jackson(model: LocalModel, sol: RateSolution, kappa: float) -> RateSolution:
    if kappa > 1:
        raise ValueError("kappa exceeds the largest shiftable busy fraction 1")
    src = source_index(model)
    r0 = model.table[0]
    tau = np.asarray(sol.tau, dtype=float).copy()
    c = sol.c_array().copy()
    idle = [i for i in range(model.N) if tau[i] == 0]
    for i in idle:
        # directions served by an idle node carry no flow; their tilt is free
        c[src == i] = 0.0
        tau[i] = kappa
    scale = np.where(src >= 0, np.asarray(sol.tau)[np.maximum(src, 0)], 1.0)
    flow = scale * r0 * c
    W = chain_counts(model)
    new_scale = np.where(src >= 0, tau[np.maximum(src, 0)], 1.0)
    c_new = (flow + kappa * W) / (new_scale * r0)
    tauK = np.array([tau[k] for k in model.K])
    return solution_from(model, rho_from_tau(tauK, model.K), c_new, sol.beta)


def _perturb_ps(model: LocalModel, sol: RateSolution, kappa: float) -> RateSolution:
    rho = rho_vector(model, sol.rho).copy()
    if rho[0] < kappa:
        others = rho.copy()
        others[0] = -1.0
        star = int(np.argmax(others))
        need = kappa - rho[0]
        if star == 0 or rho[star] < need:
            raise ValueError("kappa exceeds the largest shiftable occupancy mass")
        rho[star] -= need
        rho[0] = kappa
    T = _ps_service(model)
    tau_old = rho_vector(model, sol.rho) @ T
    tau = rho @ T
    beta = np.asarray(sol.beta, dtype=float)
    c = dict(sol.c)
    N = model.N
    for i in range(N):
        plus, minus = unit(N, i, 1), unit(N, i, -1)
        a = model.rate((), plus)
        if tau_old[i] > 0:
            cm = sol.c[minus] * tau_old[i] / tau[i] + kappa
        else:
            cm = 1.0
        c[minus] = cm
        c[plus] = (beta[i] + cm * tau[i]) / a
    return solution_from(model, rho, c, beta)


def perturb_positive(model: LocalModel, sol: RateSolution, kappa: float) -> RateSolution:
    """Nearby solution with all tilts positive and the same beta."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if sol.residual() > RESIDUAL_TOL:
        raise ValueError(f"input violates the balance system (residual {sol.residual():.3g})")
    out = (_perturb_jackson if is_jackson(model) else _perturb_ps)(model, sol, kappa)
    if out.residual() > RESIDUAL_TOL:
        raise AssertionError(f"perturbed solution has residual {out.residual():.3g}")
    if np.any(out.c_array() <= 0):
        raise AssertionError("perturbed solution has a nonpositive tilt")
    return out


def _jackson_system(model: LocalModel, c):
    """D and C+a with D tau = C+a - beta for the per-node balance equations."""
    spec = model.spec
    N = model.N
    cv = dict(zip(model.V, tilt_array(model.V, c)))
    D = np.zeros((N, N))
    rhs = np.zeros(N)
    for v, x in cv.items():
        i = [k for k, s in enumerate(v) if s < 0]
        if not i:
            rhs += x * model.rate((), v) * np.asarray(v)
            continue
        i = i[0]
        D[:, i] -= x * model.rate((), v) * np.asarray(v, dtype=float)
    return D, rhs


def check_condition3_uniqueness(spec, K, c, beta, beta2) -> dict:
    """Max deviation of averaged rates between two velocities at a fixed positive tilt.

    Jackson: busy fractions solve D tau = C+a - beta, so
    |rbar - rbar'| <= ||D^-1|| max_v r_{0,v} ||beta - beta'||.
    Processor sharing: the departure rate of class i is (c+_i a_i - beta_i)/c-_i,
    so |rbar - rbar'| <= ||beta - beta'|| / min_i c-_i.
    """
    from .local import localize

    model = localize(spec, K)
    cv = tilt_array(model.V, c)
    if np.any(cv <= 0):
        raise ValueError("tilts must be strictly positive")
    beta = np.asarray(beta, dtype=float)
    beta2 = np.asarray(beta2, dtype=float)
    if is_jackson(model):
        D, rhs = _jackson_system(model, cv)
        if abs(np.linalg.det(D)) < 1e-14:
            raise np.linalg.LinAlgError("balance matrix D is singular")
        Dinv = np.linalg.inv(D)
        src = source_index(model)
        r0 = model.table[0]

        def rbar(b):
            tau = Dinv @ (rhs - b)
            return np.where(src >= 0, tau[np.maximum(src, 0)], 1.0) * r0

        lip = np.linalg.norm(Dinv, 2) * float(r0.max())
        tau = Dinv @ (rhs - beta)
    else:
        cm = {}
        cp = {}
        for v, x in zip(model.V, cv):
            i = int(np.flatnonzero(np.asarray(v))[0])
            (cp if v[i] > 0 else cm)[i] = x
        a = np.array(model.spec.a)

        def rbar(b):
            out = np.empty(len(model.V))
            for j, v in enumerate(model.V):
                i = int(np.flatnonzero(np.asarray(v))[0])
                out[j] = a[i] if v[i] > 0 else (cp[i] * a[i] - b[i]) / cm[i]
            return out

        lip = 1.0 / min(cm.values())
        tau = np.array([(cp[i] * a[i] - beta[i]) / cm[i] for i in range(model.N)])
    dev = float(np.max(np.abs(rbar(beta) - rbar(beta2))))
    bound = lip * float(np.linalg.norm(beta - beta2))
    if dev > bound * (1 + 1e-9) + 1e-14:
        raise AssertionError(f"averaged-rate deviation {dev} exceeds bound {bound}")
    return {"deviation": dev, "bound": bound, "lipschitz": lip, "tau": tau}
