"""Independent checks for the rate solvers.

brute_force_L evaluates the local rate as the Legendre transform of the
largest facet log-moment function,

    L(beta) = sup_lambda <lambda, beta> - max_I H_I(lambda),
    H_I(lambda) = sum_v r_{I,v} (exp<lambda, v> - 1),

by plain grid search over lambda.  The minimum over occupancies is linear
in rho, so by the minimax theorem it collapses to the maximum over facets,
which is enumerated exactly.  No Newton steps or occupancy optimization are
shared with the production solvers.
"""

from __future__ import annotations

import numpy as np

from .local import LocalModel
from .rates import ell, rho_vector

BOX = 6.0


def _facet_logmgf(model: LocalModel, grid: np.ndarray) -> np.ndarray:
    """max_I H_I at each grid point (grid has shape (P, N))."""
    E = np.expm1(grid @ model.dirs.T)  # (P, m)
    return (E @ model.table.T).max(axis=1)


def _objective(model, beta, grid):
    return grid @ beta - _facet_logmgf(model, grid)


def _mesh(center, half, h, N):
    k = int(round(half / h))
    axis = np.arange(-k, k + 1) * h
    pts = np.stack(np.meshgrid(*([axis] * N), indexing="ij"), axis=-1).reshape(-1, N)
    return np.clip(pts + center, -BOX, BOX)


def brute_force_L(model: LocalModel, beta, resolution: float = 0.01) -> float:
    """Grid-search value of the local rate; a lower bound up to box truncation."""
    if model.N > 2 or len(model.K) > 2:
        raise ValueError("brute_force_L is limited to N <= 2 and |K| <= 2")
    beta = np.asarray(beta, dtype=float)
    if any(abs(beta[k]) > 1e-12 for k in model.K):
        return float("inf")
    N = model.N
    h = 0.05
    grid = _mesh(np.zeros(N), BOX, h, N)
    vals = _objective(model, beta, grid)
    best = grid[np.argmax(vals)]
    best_val = float(vals.max())
    target = resolution / 4
    while h > target:
        half = 4 * h
        h = max(h / 5, target)
        grid = _mesh(best, half, h, N)
        vals = _objective(model, beta, grid)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best, best_val = grid[k], float(vals[k])
    return max(best_val, 0.0)


def jensen_gap(model: LocalModel, rho, u) -> tuple:
    """Both sides of the Jensen reduction from facet-wise controls to averaged tilts.

    u has shape (2**|K|, |V|) and must vanish wherever the table does.
    lhs = sum_{I,v} rho_I r_{I,v} ell(u_{I,v} / r_{I,v});
    rhs = sum_v rbar_v ell(c_v) with c_v = sum_I rho_I u_{I,v} / rbar_v.
    """
    r = model.table
    u = np.asarray(u, dtype=float)
    p = rho_vector(model, rho)
    if np.any((r == 0) & (u != 0)):
        raise ValueError("controls must vanish where the rates do")
    pos = r > 0
    ratio = np.where(pos, u / np.where(pos, r, 1.0), 0.0)
    lhs = float(np.sum(p[:, None] * np.where(pos, r * ell(ratio), 0.0)))
    rbar = p @ r
    ubar = p @ u
    cpos = rbar > 0
    c = np.where(cpos, ubar / np.where(cpos, rbar, 1.0), 0.0)
    rhs = float(np.sum(np.where(cpos, rbar * ell(c), 0.0)))
    return lhs, rhs
