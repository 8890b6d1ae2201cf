"""Skorokhod problems with oblique reflection on the orthant.

An instance is a list of constraints (n_i, d_i): the domain is
G = {x : <x, n_i> >= 0 for all i}, and the constraining term may push
along nonnegative combinations of the d_i whose constraints are active.
Instances come from the facet drift gaps of a tilted local model.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .local import LocalModel, facet_drift_gap, is_jackson, localize, tilt_dict
from .model import JacksonSpec, ProcessorSharingSpec, jump_directions, transfer, unit
from .paths import PiecewisePath

UNIT_TOL = 1e-12
CONE_TOL = 1e-9
RANK_TOL = 1e-10


class SPError(RuntimeError):
    """The per-step complementarity problem could not be solved."""


@dataclass(frozen=True, eq=False)
class SPInstance:
    normals: np.ndarray  # (q, N)
    dirs: np.ndarray  # (q, N)
    kind: str = "generic"

    def __post_init__(self):
        n = np.atleast_2d(np.asarray(self.normals, dtype=float))
        d = np.atleast_2d(np.asarray(self.dirs, dtype=float))
        if n.shape != d.shape:
            raise ValueError("normals and directions must have the same shape")
        if np.any(np.abs(np.linalg.norm(n, axis=1) - 1) > UNIT_TOL):
            raise ValueError("normals must have unit length")
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1) > UNIT_TOL):
            raise ValueError("directions must have unit length")
        if np.any(np.einsum("ij,ij->i", n, d) <= 0):
            raise ValueError("each direction must point into its own constraint")
        n.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "dirs", d)

    @property
    def q(self) -> int:
        return self.normals.shape[0]

    @property
    def N(self) -> int:
        return self.normals.shape[1]

    def slack(self, x) -> np.ndarray:
        return self.normals @ np.asarray(x, dtype=float)

    def active(self, x, tol=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        tol = CONE_TOL * (1 + np.linalg.norm(x)) if tol is None else tol
        return np.flatnonzero(self.slack(x) <= tol)

    def subset(self, idx) -> "SPInstance":
        idx = list(idx)
        return SPInstance(self.normals[idx], self.dirs[idx], self.kind)


def _normalize(v):
    v = np.asarray(v, dtype=float)
    nrm = np.linalg.norm(v)
    if nrm == 0:
        raise ValueError("zero reflection direction")
    return v / nrm


def _tilt(spec, c):
    return tilt_dict(jump_directions(spec), c)


def sp_for_jackson(spec: JacksonSpec, c) -> SPInstance:
    """n_i = e_i and d_i the normalized drift lost when node i idles."""
    cv = _tilt(spec, c)
    if any(x <= 0 for x in cv.values()):
        raise ValueError("tilts must be strictly positive")
    N = spec.N
    d = np.zeros((N, N))
    for i in range(N):
        d[i, i] += cv.get(unit(N, i, -1), 0.0) * spec.sigma[i] * spec.p_exit(i)
        for j in range(N):
            if j != i and spec.p(i, j) > 0:
                d[i] -= cv[transfer(N, i, j)] * spec.sigma[i] * spec.p(i, j) * (np.eye(N)[j] - np.eye(N)[i])
    return SPInstance(np.eye(N), np.array([_normalize(x) for x in d]), "jackson")


def _ps_cm(spec, c):
    cv = _tilt(spec, c)
    if any(x <= 0 for x in cv.values()):
        raise ValueError("tilts must be strictly positive")
    return np.array([cv[unit(spec.N, i, -1)] for i in range(spec.N)])


def sp_for_ps(spec: ProcessorSharingSpec, c) -> SPInstance:
    """d_i = CL(e_i - f) normalized, plus the redundant constraint n = d = CL 1 normalized."""
    N = spec.N
    B = _ps_cm(spec, c) * np.array(spec.sigma)
    if N == 1:
        # e_1 - f vanishes; the single constraint reflects normally
        return SPInstance(np.eye(1), np.eye(1), "ps")
    f = np.array(spec.f)
    dirs = [_normalize(B * (np.eye(N)[i] - f)) for i in range(N)]
    extra = _normalize(B)
    normals = np.vstack([np.eye(N), extra])
    if np.any(extra <= 0):
        raise AssertionError("supplemental normal must be positive to leave the orthant unchanged")
    return SPInstance(normals, np.vstack(dirs + [extra]), "ps")


def sp_for(spec, c) -> SPInstance:
    return sp_for_jackson(spec, c) if isinstance(spec, JacksonSpec) else sp_for_ps(spec, c)


def ps_transform_check(spec: ProcessorSharingSpec, c, sp: SPInstance | None = None) -> float:
    """Max deviation between sp and the diagonal image B = C Lambda of the canonical instance.

    The canonical instance has n_i = e_i, d_i = (e_i - f)/|e_i - f| and
    n = d = 1/sqrt(N) as supplemental constraint; its image under B has
    normals B n/|B n| and directions B d/|B d|.
    """
    sp = sp or sp_for_ps(spec, c)
    N = spec.N
    if N == 1:
        return float(np.abs(sp.dirs - 1).max())
    B = _ps_cm(spec, c) * np.array(spec.sigma)
    f = np.array(spec.f)
    canon_n = np.vstack([np.eye(N), np.ones(N) / np.sqrt(N)])
    canon_d = np.vstack([(np.eye(N)[i] - f) / np.linalg.norm(np.eye(N)[i] - f) for i in range(N)]
                        + [np.ones(N) / np.sqrt(N)])
    img_n = np.array([_normalize(B * x) for x in canon_n])
    img_d = np.array([_normalize(B * x) for x in canon_d])
    return float(max(np.abs(img_n - sp.normals).max(), np.abs(img_d - sp.dirs).max()))


# --- cones and condition checks -------------------------------------------

def cone_coefficients(sp: SPInstance, idx, gamma):
    """Nonnegative least squares for gamma over the directions in idx; returns (alpha, residual)."""
    idx = list(idx)
    alpha, res = nnls(sp.dirs[idx].T, np.asarray(gamma, dtype=float))
    return alpha, float(res)


def cone_membership(sp: SPInstance, x, gamma) -> bool:
    """Whether gamma is a unit nonnegative combination of the directions active at x."""
    idx = sp.active(x)
    if len(idx) == 0:
        raise ValueError("point is interior: no active constraints")
    gamma = np.asarray(gamma, dtype=float)
    if abs(np.linalg.norm(gamma) - 1) > CONE_TOL:
        return False
    return cone_coefficients(sp, idx, gamma)[1] <= CONE_TOL


def restrict_to(sp: SPInstance, K) -> SPInstance:
    """Constraints of sp that bind in the local domain: normals supported inside K."""
    K = set(K)
    keep = [i for i in range(sp.q) if set(np.flatnonzero(np.abs(sp.normals[i]) > UNIT_TOL)) <= K]
    return SPInstance(sp.normals[keep], sp.dirs[keep], sp.kind) if keep else None


def sp_for_local(model: LocalModel, c) -> SPInstance | None:
    """Instance of the tilted local model; None when K is empty (no boundary)."""
    return restrict_to(sp_for(model.spec, c), model.K)


@dataclass
class Condition4Report:
    passed: bool
    failures: list = field(default_factory=list)
    facets: list = field(default_factory=list)

    def to_dict(self):
        return {"passed": self.passed, "failures": self.failures, "facets": self.facets}


def check_condition4(model: LocalModel, c, sp: SPInstance | None = None) -> Condition4Report:
    """Domain, direction and facet-gap cone checks for the tilted local model."""
    K = model.K
    N = model.N
    failures = []
    facets = []
    if not K:
        return Condition4Report(True, [], [])
    sp = restrict_to(sp if sp is not None else sp_for(model.spec, c), K)
    if sp is None:
        return Condition4Report(False, ["no constraint binds in the local domain"], [])
    # the constraints must carve out {x : x_k >= 0, k in K}: every x_k >= 0 is present
    # and any other normal is a nonnegative combination of those
    for k in K:
        if not any(np.allclose(n, np.eye(N)[k], atol=UNIT_TOL) for n in sp.normals):
            failures.append(f"domain: constraint x_{k} >= 0 missing")
    basis = np.eye(N)[list(K)]
    for i, n in enumerate(sp.normals):
        if nnls(basis.T, n)[1] > CONE_TOL:
            failures.append(f"domain: normal {i} is not implied by the coordinate constraints")
    for i in range(sp.q):
        if sp.normals[i] @ sp.dirs[i] <= 0:
            failures.append(f"direction {i} does not point into its constraint")
    for m in range(1, model.n_facets):
        I = model.facet(m)
        gap = facet_drift_gap(model, I, c)
        nrm = float(np.linalg.norm(gap))
        x = np.ones(N)
        x[list(I)] = 0.0
        ok = True if nrm <= 1e-12 else cone_membership(sp, x, gap / nrm)
        facets.append({"I": list(I), "gap": gap.tolist(), "passed": bool(ok)})
        if not ok:
            failures.append(f"facet {list(I)}: drift gap outside the reflection cone")
    return Condition4Report(not failures, failures, facets)


# --- regularity -----------------------------------------------------------

@dataclass
class QMatrix:
    Q: np.ndarray
    spectral_radius: float


def q_matrix(sp: SPInstance) -> np.ndarray:
    G = sp.dirs @ sp.normals.T  # G[i, j] = <d_i, n_j>
    return np.abs(np.eye(sp.q) - G / np.diag(G)[:, None])


def spectral_radius(Q, tol=1e-10, max_iter=2000) -> float:
    """Perron root of a nonnegative matrix via Collatz-Wielandt bounds on Q + I.

    The shift makes the iteration aperiodic; lower and upper bounds bracket
    the root at every step.  Falls back to a dense eigensolve if the bounds
    have not met after max_iter steps (reducible matrices).
    """
    Q = np.asarray(Q, dtype=float)
    if Q.size == 0:
        return 0.0
    A = Q + np.eye(len(Q))
    x = np.ones(len(Q))
    for _ in range(max_iter):
        y = A @ x
        ratio = y / x
        lo, hi = ratio.min(), ratio.max()
        if hi - lo <= tol * max(1.0, hi):
            return float(max(0.5 * (lo + hi) - 1.0, 0.0))
        x = y / y.max()
        if np.any(x <= 1e-300):
            break
    return float(np.max(np.abs(np.linalg.eigvals(Q))))


def regularity_Q(sp: SPInstance):
    """(QMatrix, regular) for instances with independent directions, else (None, None)."""
    if sp.q > sp.N or np.linalg.matrix_rank(sp.dirs, tol=RANK_TOL) < sp.q:
        return None, None
    Q = q_matrix(sp)
    rho = spectral_radius(Q)
    return QMatrix(Q, rho), bool(rho < 1 - 1e-9)


def localize_sp(sp: SPInstance, x) -> SPInstance:
    """Sub-instance of the constraints active at boundary point x."""
    idx = sp.active(x)
    if len(idx) == 0:
        raise ValueError("point is interior: no active constraints")
    sub = sp.subset(idx)
    if sp.kind == "jackson":
        _, regular = regularity_Q(sub)
        if regular is False:
            raise AssertionError("localized instance of a Jackson reflection is not regular")
    return sub


# --- time stepping --------------------------------------------------------

@dataclass
class SPSolution:
    t: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    eta: np.ndarray
    total_variation: float
    report: dict = field(default_factory=dict)


def _lcp_jacobi(M, w0, diag, tol, max_iter=10_000):
    alpha = np.zeros(len(w0))
    for _ in range(max_iter):
        w = w0 + M @ alpha
        new = np.maximum(0.0, alpha - w / diag)
        if np.max(np.abs(new - alpha)) <= tol:
            return new
        alpha = new
    return None


def _lcp_enumerate(M, w0, tol):
    """Try active sets by increasing size; least-squares on each (handles dependent directions)."""
    q = len(w0)
    for size in range(1, q + 1):
        for S in itertools.combinations(range(q), size):
            S = list(S)
            a_S, *_ = np.linalg.lstsq(M[np.ix_(S, S)], -w0[S], rcond=None)
            if np.any(a_S < -tol):
                continue
            alpha = np.zeros(q)
            alpha[S] = np.maximum(a_S, 0.0)
            w = w0 + M @ alpha
            if np.all(w >= -tol) and np.all(np.abs(w[S]) <= tol):
                return alpha
    return None


def _step(sp: SPInstance, y, scale):
    """Push y back into G: alpha >= 0 with complementarity on <y + D alpha, n>."""
    w0 = sp.slack(y)
    tol = 1e-12 * scale
    if np.all(w0 >= -tol):
        return np.zeros(sp.N)
    M = sp.normals @ sp.dirs.T  # M[j, i] = <d_i, n_j>
    # small instances: enumeration is cheap and copes with dependent directions,
    # where Jacobi converges slowly
    alpha = _lcp_enumerate(M, w0, tol) if sp.q <= 6 else None
    if alpha is None:
        alpha = _lcp_jacobi(M, w0, np.diag(M).copy(), tol * 1e-2)
        if alpha is not None and np.any(w0 + M @ alpha < -tol):
            alpha = None
    if alpha is None:
        raise SPError("per-step complementarity problem has no solution")
    return sp.dirs.T @ alpha


def solve_sp(sp: SPInstance, psi: PiecewisePath, dt: float, verify: bool = True) -> SPSolution:
    """Time-stepped solution of phi = psi + eta with phi in G."""
    if psi.N != sp.N:
        raise ValueError("path dimension does not match the instance")
    steps = max(1, int(round(psi.T / dt)))
    t = np.linspace(0.0, psi.T, steps + 1)
    # include the breakpoints so kinks are resolved exactly
    t = np.union1d(t, psi.t)
    P = psi(t)
    if np.any(sp.slack(P[0]) < -CONE_TOL * (1 + np.linalg.norm(P[0]))):
        raise ValueError("path must start inside the domain")
    scale = 1.0 + float(np.abs(P).max())
    eta = np.zeros_like(P)
    phi = np.zeros_like(P)
    phi[0] = P[0]
    tv = 0.0
    for k in range(1, len(t)):
        y = P[k] + eta[k - 1]
        deta = _step(sp, y, scale)
        eta[k] = eta[k - 1] + deta
        phi[k] = P[k] + eta[k]
        tv += float(np.linalg.norm(deta))
    sol = SPSolution(t, P, phi, eta, tv)
    if verify:
        sol.report = verify_sp(sp, sol)
        if not sol.report["passed"]:
            raise SPError(f"solution fails verification: {sol.report['failures']}")
    return sol


def verify_sp(sp: SPInstance, sol: SPSolution) -> dict:
    """Mechanical check of the defining properties on the time grid."""
    tv_psi = float(np.sum(np.linalg.norm(np.diff(sol.psi, axis=0), axis=1)))
    tol = 1e-6 * (1 + tv_psi)
    failures = []
    if not np.array_equal(sol.phi, sol.psi + sol.eta):
        failures.append("phi != psi + eta")
    if np.any(sol.eta[0] != 0):
        failures.append("eta(0) != 0")
    worst = float(np.min(sol.phi @ sp.normals.T))
    if worst < -tol:
        failures.append(f"phi leaves the domain by {-worst:.3g}")
    if not np.isfinite(sol.total_variation):
        failures.append("unbounded variation")
    deta = np.diff(sol.eta, axis=0)
    moved = 0
    for k, d in enumerate(deta, start=1):
        nrm = np.linalg.norm(d)
        if nrm <= 1e-14:
            continue
        moved += 1
        x = sol.phi[k]
        idx = np.flatnonzero(sp.slack(x) <= tol)
        if len(idx) == 0:
            failures.append(f"eta moves at interior point t={sol.t[k]:.6g}")
            continue
        if cone_coefficients(sp, idx, d / nrm)[1] > max(tol, CONE_TOL):
            failures.append(f"eta increment outside the reflection cone at t={sol.t[k]:.6g}")
    return {"passed": not failures, "failures": failures[:10], "tolerance": tol,
            "min_slack": worst, "pushes": moved}


def lipschitz_probe(sp: SPInstance, psi1: PiecewisePath, psi2: PiecewisePath, dt: float) -> float:
    """sup|phi1 - phi2| / sup|psi1 - psi2| on a common grid."""
    s1 = solve_sp(sp, psi1, dt)
    s2 = solve_sp(sp, psi2, dt)
    t = np.union1d(s1.t, s2.t)
    phi1 = np.stack([np.interp(t, s1.t, s1.phi[:, i]) for i in range(sp.N)], axis=-1)
    phi2 = np.stack([np.interp(t, s2.t, s2.phi[:, i]) for i in range(sp.N)], axis=-1)
    dpsi = np.max(np.linalg.norm(psi1(t) - psi2(t), axis=1))
    if dpsi == 0:
        return 0.0
    return float(np.max(np.linalg.norm(phi1 - phi2, axis=1)) / dpsi)
