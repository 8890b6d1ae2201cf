"""Local rate function L(beta) of a local model.

L(beta) is the least entropy cost sum_v rbar_v ell(c_v) of tilting the
facet-averaged rates rbar_v = sum_I rho_I r_{I,v} by multipliers c_v so that
the tilted mean velocity sum_v rbar_v c_v v equals beta.  For fixed averaged
rates w the inner minimum over c is computed through its concave dual

    sup_lambda <lambda, beta> - sum_v w_v (exp<lambda, v> - 1),

whose maximizer gives c_v = exp<lambda, v>.  The outer minimum runs over
the occupancies: per-node busy fractions tau in [0,1]^K for Jackson
networks, the facet simplex for processor sharing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.optimize import linprog
from scipy.special import xlogy

from .local import LocalModel, is_jackson, localize, source_index, tilt_dict
from .model import NetworkSpec, facet_index

LAMBDA_CAP = 1e3
ZERO_VALUE = 1e-10
TAU_FLOOR = 1e-12


class SolverError(RuntimeError):
    """An iterative solver failed to converge."""


def ell(a):
    """a log a - a + 1 for a >= 0 (0 log 0 = 0), +inf for a < 0."""
    a = np.asarray(a, dtype=float)
    out = np.where(a < 0, np.inf, xlogy(np.maximum(a, 0), np.maximum(a, 0)) - a + 1.0)
    return float(out) if out.ndim == 0 else out


# --- inner problem ---------------------------------------------------------

@dataclass
class DualSolution:
    lam: np.ndarray
    c: np.ndarray
    value: float
    status: str  # "zero" | "finite" | "infinite"
    support: np.ndarray = field(repr=False, default=None)
    iterations: int = 0


def _status(value: float) -> str:
    if not np.isfinite(value):
        return "infinite"
    return "zero" if value < ZERO_VALUE else "finite"


def _newton(A, w, b, mu0=None, tol=1e-12, max_iter=500):
    """Maximize g(mu) = <b, mu> - sum w (exp(A mu) - 1); A has full column rank.

    Returns (mu, value, iterations) or None when the iterates run away.
    """
    r = A.shape[1]
    mu = np.zeros(r) if mu0 is None else np.array(mu0, dtype=float)
    scale = max(1.0, float(np.abs(b).max(initial=0.0)), float(w.sum()))

    def g(m):
        z = np.minimum(A @ m, 700.0)
        return float(b @ m - np.sum(w * np.expm1(z)))

    gm = g(mu)
    for it in range(max_iter):
        e = w * np.exp(np.minimum(A @ mu, 700.0))
        grad = b - A.T @ e
        if np.max(np.abs(grad)) <= tol * scale:
            return mu, gm, it
        H = (A * e[:, None]).T @ A
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        slope = float(grad @ step)
        t = 1.0
        while True:
            trial = mu + t * step
            gt = g(trial)
            if gt >= gm + 1e-4 * t * slope:
                break
            if abs(gt - gm) <= 1e-14 * max(1.0, abs(gm)):
                # change below rounding: judge the step by the gradient instead
                et = w * np.exp(np.minimum(A @ trial, 700.0))
                if np.max(np.abs(b - A.T @ et)) < np.max(np.abs(grad)):
                    break
            t *= 0.5
            if t < 1e-16:
                # no further ascent possible in floating point
                if np.max(np.abs(grad)) <= 1e-11 * scale:
                    return mu, gm, it
                return None
        stalled = gt - gm <= 1e-15 * max(1.0, abs(gm))
        mu, gm = trial, gt
        if stalled and np.max(np.abs(grad)) <= 1e-10 * scale:
            # objective no longer moves: gradient is at its rounding floor
            return mu, gm, it
        if np.linalg.norm(mu) > LAMBDA_CAP:
            return None
    return None


def _span_basis(D, tol=1e-12):
    if D.shape[0] == 0:
        return np.zeros((D.shape[1], 0))
    _, s, vt = np.linalg.svd(D, full_matrices=False)
    rank = int(np.sum(s > tol * max(1.0, s[0])))
    return vt[:rank].T


def _solve_on(D, w, beta, lam0=None, max_iter=500):
    """Newton on the span of the directions D; None if beta is off-span or iterates diverge."""
    B = _span_basis(D)
    if B.shape[1] == 0:
        return (np.zeros_like(beta), 0.0, 0) if np.allclose(beta, 0, atol=1e-12) else "off-span"
    resid = beta - B @ (B.T @ beta)
    if np.linalg.norm(resid) > 1e-10 * (1 + np.linalg.norm(beta)):
        return "off-span"
    mu0 = None if lam0 is None else B.T @ lam0
    res = _newton(D @ B, w, B.T @ beta, mu0, max_iter=max_iter)
    if res is None:
        return None
    mu, value, it = res
    return B @ mu, value, it


def _usable_directions(D, w, beta):
    """Directions that carry positive flow in some exact decomposition of beta.

    Returns a boolean mask, or None when beta is not attainable at all.
    """
    m = len(w)
    A_eq = (D * w[:, None]).T
    usable = np.zeros(m, dtype=bool)
    for k in range(m):
        cost = np.zeros(m)
        cost[k] = -1.0
        res = linprog(cost, A_eq=A_eq, b_eq=beta, bounds=[(0, 1e6)] * m, method="highs")
        if res.status == 2:
            return None
        if res.status != 0:
            raise SolverError(f"feasibility LP failed: {res.message}")
        usable[k] = -res.fun > 1e-9
    return usable


def dual_solve(D, w, beta, lam0=None) -> DualSolution:
    """Inner problem for direction matrix D (m x N) and weights w (m,)."""
    D = np.asarray(D, dtype=float)
    w = np.asarray(w, dtype=float)
    beta = np.asarray(beta, dtype=float)
    N = D.shape[1]
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    live = w > 0
    penalty = 0.0
    support = live.copy()
    res = _solve_on(D[live], w[live], beta, lam0) if live.any() else (
        (np.zeros(N), 0.0, 0) if np.allclose(beta, 0, atol=1e-12) else "off-span")
    if res == "off-span":
        return DualSolution(np.full(N, np.nan), np.full(len(w), np.nan), math.inf, "infinite", support)
    if res is None:
        # beta sits on the relative boundary of the attainable cone (or outside it):
        # find the directions that can carry flow and solve on those alone
        usable = _usable_directions(D[live], w[live], beta)
        if usable is None:
            return DualSolution(np.full(N, np.nan), np.full(len(w), np.nan), math.inf, "infinite", support)
        support = np.zeros(len(w), dtype=bool)
        support[np.flatnonzero(live)[usable]] = True
        penalty = float(w[live & ~support].sum())
        if support.any():
            res = _solve_on(D[support], w[support], beta, None, max_iter=5000)
        else:
            res = (np.zeros(N), 0.0, 0)
        if res is None or res == "off-span":
            raise SolverError("dual Newton iteration did not converge")
    lam, value, it = res
    c = np.exp(np.minimum(D @ lam, 700.0))
    c[live & ~support] = 0.0
    value = max(value + penalty, 0.0)
    return DualSolution(lam, c, value, _status(value), support, it)


def inner_dual_solve(weights: dict, beta) -> DualSolution:
    """Inner problem with weights given as a {direction: w_v} mapping."""
    V = list(weights)
    D = np.array(V, dtype=float).reshape(len(V), len(beta))
    return dual_solve(D, [weights[v] for v in V], beta)


# --- occupancies -----------------------------------------------------------

def rho_from_tau(tau, K) -> dict:
    """Product-form facet occupancies with busy fractions tau (one per index in K)."""
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (len(K),):
        raise ValueError("need one busy fraction per index in K")
    if np.any(tau < 0) or np.any(tau > 1):
        raise ValueError("busy fractions must lie in [0, 1]")
    rho = {}
    for bits in product((0, 1), repeat=len(K)):
        I = tuple(k for k, b in zip(K, bits) if b)
        p = 1.0
        for t, b in zip(tau, bits):
            p *= (1.0 - t) if b else t
        rho[I] = p
    return rho


def rho_vector(model: LocalModel, rho) -> np.ndarray:
    if isinstance(rho, dict):
        out = np.zeros(model.n_facets)
        for I, p in rho.items():
            out[model.mask(I)] = p
        return out
    return np.asarray(rho, dtype=float)


def rho_dict(model: LocalModel, rho) -> dict:
    return {model.facet(m): float(p) for m, p in enumerate(rho_vector(model, rho))}


def rbar_from(model: LocalModel, rho) -> dict:
    """Facet-averaged rates rbar_v = sum_I rho_I r_{I,v}."""
    r = rho_vector(model, rho)
    if np.any(r < 0) or abs(r.sum() - 1) > 1e-12:
        raise ValueError("occupancies must be nonnegative and sum to 1")
    return dict(zip(model.V, (r @ model.table).tolist()))


def tau_from_rho(model: LocalModel, rho) -> np.ndarray:
    """Per-node busy fraction: total occupancy of facets where the node is not pinned at 0."""
    r = rho_vector(model, rho)
    tau = np.ones(model.N)
    for b, k in enumerate(model.K):
        tau[k] = sum(p for m, p in enumerate(r) if not m >> b & 1)
    return tau


# --- solutions -------------------------------------------------------------

@dataclass
class RateSolution:
    value: float
    status: str
    beta: np.ndarray
    K: tuple
    V: tuple
    c: dict
    rho: dict
    tau: np.ndarray
    rbar: dict
    lam: np.ndarray
    iterations: int = 0

    def c_array(self) -> np.ndarray:
        return np.array([self.c[v] for v in self.V])

    def rbar_array(self) -> np.ndarray:
        return np.array([self.rbar[v] for v in self.V])

    def residual(self) -> float:
        """Norm of sum_v rbar_v c_v v - beta."""
        D = np.array(self.V, dtype=float).reshape(len(self.V), len(self.beta))
        return float(np.linalg.norm(D.T @ (self.rbar_array() * self.c_array()) - self.beta))

    def to_dict(self) -> dict:
        fin = np.isfinite(self.value)
        return {
            "value": float(self.value) if fin else None,
            "status": self.status,
            "K": list(self.K),
            "beta": [float(b) for b in self.beta],
            "c": [[list(v), self.c[v]] for v in self.V] if fin else None,
            "tau": [float(t) for t in self.tau] if fin else None,
            "rho": [[list(I), p] for I, p in self.rho.items()] if fin else None,
            "rbar": [[list(v), self.rbar[v]] for v in self.V] if fin else None,
            "lambda": [float(x) for x in self.lam] if fin else None,
        }


def _infinite(model: LocalModel, beta) -> RateSolution:
    nan = float("nan")
    return RateSolution(math.inf, "infinite", np.asarray(beta, float), model.K, model.V,
                        {v: nan for v in model.V}, {}, np.full(model.N, nan),
                        {v: nan for v in model.V}, np.full(model.N, nan))


def _on_facet(model: LocalModel, beta) -> bool:
    return all(abs(beta[k]) <= 1e-12 for k in model.K)


# --- Jackson ---------------------------------------------------------------

class _JacksonObjective:
    """F(tau_K) = inner value at weights w_v = tau_src(v) r_{0,v}, with gradient and Hessian."""

    def __init__(self, model: LocalModel, beta):
        self.model = model
        self.beta = beta
        self.D = model.dirs
        self.r0 = model.table[0].copy()
        self.src = source_index(model)
        self.K = np.array(model.K, dtype=int)
        self.lam = None
        self.evals = 0

    def weights(self, tauK):
        tau = np.ones(self.model.N)
        tau[self.K] = tauK
        scale = np.where(self.src >= 0, tau[np.maximum(self.src, 0)], 1.0)
        return self.r0 * scale, tau

    def __call__(self, tauK, derivatives=True):
        w, tau = self.weights(tauK)
        sol = dual_solve(self.D, w, self.beta, self.lam)
        self.evals += 1
        if not np.isfinite(sol.value):
            return sol, math.inf, None, None
        self.lam = sol.lam
        if not derivatives:
            return sol, sol.value, None, None
        k = len(self.K)
        grad = np.zeros(k)
        G = np.zeros((self.model.N, k))  # d(grad_lambda)/d tau_k
        for b, node in enumerate(self.K):
            sel = self.src == node
            grad[b] = -np.sum(self.r0[sel] * (sol.c[sel] - 1.0))
            G[:, b] = -(self.D[sel].T @ (self.r0[sel] * sol.c[sel]))
        used = sol.support
        P = (self.D[used] * (w[used] * sol.c[used])[:, None]).T @ self.D[used]
        hess = G.T @ np.linalg.pinv(P, rcond=1e-12) @ G
        return sol, sol.value, grad, hess


def _projected_newton(fun, x0, lo=0.0, hi=1.0, gtol=1e-11, max_iter=200):
    """Box-constrained projected Newton with Armijo backtracking (convex objective)."""
    x = np.clip(np.asarray(x0, float), lo, hi)
    sol, f, g, H = fun(x)
    if not np.isfinite(f):
        return x, sol, f, 0
    for it in range(max_iter):
        pg = x - np.clip(x - g, lo, hi)
        if np.max(np.abs(pg), initial=0.0) <= gtol:
            return x, sol, f, it
        eps = min(1e-6, float(np.max(np.abs(pg))))
        fixed = ((x <= lo + eps) & (g > 0)) | ((x >= hi - eps) & (g < 0))
        free = ~fixed
        d = -g.copy()
        if free.any():
            Hf = H[np.ix_(free, free)] + 1e-12 * np.eye(int(free.sum()))
            try:
                d[free] = -np.linalg.solve(Hf, g[free])
            except np.linalg.LinAlgError:
                d[free] = -g[free]
            if g[free] @ d[free] >= 0:
                d[free] = -g[free]
        t = 1.0
        while True:
            xt = np.clip(x + t * d, lo, hi)
            st, ft, gt, Ht = fun(xt)
            if ft <= f + 1e-4 * float(g @ (xt - x)):
                break
            t *= 0.5
            if t < 1e-14:
                return x, sol, f, it
        improved = f - ft
        x, sol, f, g, H = xt, st, ft, gt, Ht
        if improved <= 1e-15 * max(1.0, abs(f)) and np.max(np.abs(x - np.clip(x - g, lo, hi))) <= 1e-8:
            return x, sol, f, it
    raise SolverError("projected Newton over busy fractions did not converge")


def local_rate_jackson(spec, K, beta, model: LocalModel | None = None) -> RateSolution:
    model = model or localize(spec, K)
    if not is_jackson(model):
        raise TypeError("local_rate_jackson needs a Jackson network")
    beta = np.asarray(beta, dtype=float)
    if not _on_facet(model, beta):
        return _infinite(model, beta)
    obj = _JacksonObjective(model, beta)
    k = len(model.K)
    if k == 0:
        sol, value, _, _ = obj(np.zeros(0), derivatives=False)
        tauK, it = np.zeros(0), sol.iterations
    else:
        starts = [np.full(k, 0.5), np.ones(k)]
        best = None
        for x0 in starts:
            # tau_i is kept off exact zero: there a node's directions vanish from the
            # dual and its one-sided derivative is not available
            tauK, sol, value, it = _projected_newton(obj, x0, lo=TAU_FLOOR)
            if np.isfinite(value):
                best = (tauK, sol, value, it)
                break
            best = best or (tauK, sol, value, it)
        tauK, sol, value, it = best
    if not np.isfinite(value):
        return _infinite(model, beta)
    w, tau = obj.weights(tauK)
    rho = rho_from_tau(tauK, model.K)
    rbar = rbar_from(model, rho)
    if not np.allclose(list(rbar.values()), w, rtol=1e-12, atol=1e-13):
        raise AssertionError("product-form occupancies do not reproduce tau-scaled rates")
    return RateSolution(value, _status(value), beta, model.K, model.V, tilt_dict(model.V, sol.c),
                        rho, tau, dict(zip(model.V, w.tolist())), sol.lam, it)


# --- processor sharing ----------------------------------------------------

def ps_coordinate(A: float, M: float, b: float):
    """min A ell(cp) + M ell(cm) s.t. cp A - cm M = b.

    Returns (value, cp, cm, dvalue/dM, d2value/dM2).  The minimizer is
    cp = x, cm = 1/x with x the positive root of A x^2 - b x - M = 0.
    """
    if M > 0:
        disc = math.sqrt(b * b + 4 * A * M)
        x = (b + disc) / (2 * A) if b >= 0 else 2 * M / (disc - b)
        lam = math.log(x)
        value = lam * b - A * (x - 1) - M * (1 / x - 1)
        return max(value, 0.0), x, 1 / x, 1 - 1 / x, 1 / (x * x * disc)
    if b > 0:
        return A * ell(b / A), b / A, 0.0, -math.inf, math.inf
    if b == 0:
        return A, 0.0, 0.0, -math.inf, math.inf
    return math.inf, math.nan, math.nan, -math.inf, math.inf


def _simplex_projection(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(v) + 1)
    k = ind[u - css / ind > 0][-1]
    return np.maximum(v - css[k - 1] / k, 0.0)


class _PSObjective:
    def __init__(self, model: LocalModel, beta):
        N = model.N
        self.beta = beta
        self.A = np.zeros(N)
        self.T = np.zeros((model.n_facets, N))
        for j, v in enumerate(model.V):
            i = int(np.flatnonzero(np.asarray(v))[0])
            if v[i] > 0:
                self.A[i] = model.table[0, j]
            else:
                self.T[:, i] = model.table[:, j]

    def __call__(self, rho):
        tau = rho @ self.T
        vals = [ps_coordinate(a, m, b) for a, m, b in zip(self.A, tau, self.beta)]
        f = sum(v[0] for v in vals)
        dh = np.array([max(v[3], -1e12) for v in vals])
        return f, self.T @ dh, tau, vals


def _floored_projection(v, floor):
    """Projection onto {rho >= floor, sum rho = 1}."""
    n = len(v)
    return floor + (1 - n * floor) * _simplex_projection((v - floor) / (1 - n * floor))


def local_rate_ps(spec, K, beta, model: LocalModel | None = None, tol=1e-10, max_iter=20000) -> RateSolution:
    model = model or localize(spec, K)
    if is_jackson(model):
        raise TypeError("local_rate_ps needs a processor-sharing network")
    beta = np.asarray(beta, dtype=float)
    if not _on_facet(model, beta):
        return _infinite(model, beta)
    obj = _PSObjective(model, beta)
    # occupancies are kept off exact zero so that every service rate stays positive
    floor = TAU_FLOOR if model.n_facets > 1 else 0.0
    proj = lambda v: _floored_projection(v, floor)
    rho = proj(np.eye(model.n_facets)[0])
    f, g, tau, vals = obj(rho)
    step = 1.0 / max(1.0, float(np.abs(g).max()))
    it = 0
    flat = 0
    for it in range(max_iter):
        pg = rho - proj(rho - g)
        if np.max(np.abs(pg)) <= tol:
            break
        d = proj(rho - step * g) - rho
        # d sums to zero, so centering g removes cancellation in the slope
        slope = float((g - g.mean()) @ d)
        t = 1.0
        while slope < 0:
            new = rho + t * d
            fn, gn, taun, valsn = obj(new)
            if fn <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-16:
                slope = 0.0
        if slope >= 0:
            # no descent left in floating point; accept only a near-stationary point
            if np.max(np.abs(pg)) > 1e-5:
                raise SolverError("projected gradient over facet occupancies stalled")
            break
        # objective flat to rounding for several steps: the remaining error is second order
        flat = flat + 1 if f - fn <= 1e-15 * (1.0 + abs(f)) else 0
        if flat >= 5 and np.max(np.abs(pg)) <= 1e-5:
            rho, f, g, tau, vals = new, fn, gn, taun, valsn
            break
        s, y = new - rho, gn - g
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 1e-300 else 1e6
        step = min(max(step, 1e-14), 1e10)
        rho, f, g, tau, vals = new, fn, gn, taun, valsn
    else:
        raise SolverError("projected gradient over facet occupancies did not converge")
    if not np.isfinite(f):
        return _infinite(model, beta)
    c = {}
    lam = np.zeros(model.N)
    for j, v in enumerate(model.V):
        i = int(np.flatnonzero(np.asarray(v))[0])
        c[v] = vals[i][1] if v[i] > 0 else vals[i][2]
    for i in range(model.N):
        lam[i] = math.log(vals[i][1]) if vals[i][1] > 0 else -math.inf
    rbar = rbar_from(model, rho)
    value = max(f, 0.0)
    return RateSolution(value, _status(value), beta, model.K, model.V, c, rho_dict(model, rho),
                        tau, rbar, lam, it)


# --- dispatch --------------------------------------------------------------

def local_rate(spec: NetworkSpec, K, beta) -> RateSolution:
    model = localize(spec, K)
    if is_jackson(model):
        return local_rate_jackson(spec, K, beta, model)
    return local_rate_ps(spec, K, beta, model)


def L_point(spec: NetworkSpec, x, beta) -> float:
    """L(x, beta): the local rate at the facet of x, infinite if beta leaves that facet."""
    x = np.asarray(x, dtype=float)
    if np.any(x < -1e-12):
        raise ValueError("point must lie in the orthant")
    K = facet_index(x)
    return local_rate(spec, K, beta).value
