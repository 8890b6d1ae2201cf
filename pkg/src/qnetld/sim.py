"""Monte Carlo for scaled local models: tube probabilities, importance sampling, occupancies.

The scaled process X^n(t) = X(nt)/n of a local model is simulated exactly on
[0, horizon].  Coordinates in K stay nonnegative; the others are signed
integers, which realizes the unconstrained directions directly.  Each
replication draws from its own Philox stream keyed by (seed, rep), so results
do not depend on how replications are scheduled.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.special import logsumexp

from .local import LocalModel

CHUNK = 256


@dataclass
class SimConfig:
    n: int
    reps: int
    seed: int = 0
    epsilon: float = 0.1
    beta: np.ndarray = None
    control: object = None  # tilt for the simulated rates u = c r; None means c = 1
    horizon: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if int(self.reps) != self.reps or self.reps < 1:
            raise ValueError("reps must be a positive integer")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        self.n, self.reps = int(self.n), int(self.reps)


@dataclass
class TrajectorySample:
    times: np.ndarray  # jump times
    states: np.ndarray  # post-jump integer states, shape (jumps, N)
    occupation: np.ndarray  # time spent in each facet (bitmask over K)
    terminal: np.ndarray  # X^n(horizon)
    log_weight: float  # log dP/dPbar of the path
    inside: bool  # stayed strictly inside the tube


@dataclass
class TubeEstimate:
    p_hat: float
    std_error: float
    q_hat: float
    method: str
    n: int
    reps: int
    flagged: bool = False  # no path landed in the tube

    def to_dict(self):
        return {"pHat": self.p_hat, "standardError": self.std_error,
                "qHat": None if math.isinf(self.q_hat) else self.q_hat,
                "method": self.method, "n": self.n, "reps": self.reps, "flagged": self.flagged}


class _Tables:
    """Per-facet cumulative tilted rates and log rate ratios, as plain Python lists."""

    def __init__(self, model: LocalModel, control):
        c = model.tilt(control)
        r = model.table
        u = r * c[None, :]
        if np.any((r > 0) & (u <= 0)):
            raise ValueError("control must be positive wherever the rate is")
        self.K = list(model.K)
        self.dirs = [tuple(int(x) for x in v) for v in model.V]
        self.cum = [np.cumsum(row).tolist() for row in u]
        self.total = [float(row.sum()) for row in u]
        self.gap = [float((u[m] - r[m]).sum()) for m in range(len(r))]
        with np.errstate(divide="ignore"):
            lr = np.where(u > 0, np.log(np.where(u > 0, r, 1.0) / np.where(u > 0, u, 1.0)), 0.0)
        self.logratio = lr.tolist()
        self.unit = bool(np.all(c == 1.0))


def rng_for(seed: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) % 2**64, int(rep)]))


def _run(tab: _Tables, n: int, horizon: float, beta, eps: float, rng, stop_on_exit=False,
         record=False):
    N = len(beta)
    x = [0] * N
    K = tab.K
    t = 0.0
    logw = 0.0
    occ = [0.0] * len(tab.total)
    inside = True
    eps2 = (eps * n) ** 2  # compare in unscaled units
    nb = [b * n for b in beta]
    times, states = [], []
    exps = rng.standard_exponential(CHUNK).tolist()
    unif = rng.random(CHUNK).tolist()
    k = 0
    while True:
        m = 0
        for b, i in enumerate(K):
            if x[i] == 0:
                m |= 1 << b
        total = tab.total[m] * n
        if k == CHUNK:
            exps = rng.standard_exponential(CHUNK).tolist()
            unif = rng.random(CHUNK).tolist()
            k = 0
        hold = exps[k] / total if total > 0 else math.inf
        u01 = unif[k]
        k += 1
        end = t + hold
        if end >= horizon:
            occ[m] += horizon - t
            logw += n * tab.gap[m] * (horizon - t)
            if inside and sum((x[i] - horizon * nb[i]) ** 2 for i in range(N)) >= eps2:
                inside = False
            break
        occ[m] += hold
        logw += n * tab.gap[m] * hold
        t = end
        # the deviation is convex in t between jumps: check both ends of the segment
        if inside and sum((x[i] - t * nb[i]) ** 2 for i in range(N)) >= eps2:
            inside = False
        cum = tab.cum[m]
        j = bisect_right(cum, u01 * cum[-1])
        if j >= len(cum):  # u01 * total rounded up to the last partial sum
            j = len(cum) - 1
        v = tab.dirs[j]
        logw += tab.logratio[m][j]
        for i in range(N):
            x[i] += v[i]
        if inside and sum((x[i] - t * nb[i]) ** 2 for i in range(N)) >= eps2:
            inside = False
        if record:
            times.append(t)
            states.append(tuple(x))
        if stop_on_exit and not inside:
            break
    return x, logw, occ, inside, times, states


def _beta(model, cfg):
    return np.zeros(model.N) if cfg.beta is None else np.asarray(cfg.beta, dtype=float)


def simulate_path(model: LocalModel, cfg: SimConfig, rep: int) -> TrajectorySample:
    tab = _Tables(model, cfg.control)
    beta = _beta(model, cfg)
    x, logw, occ, inside, times, states = _run(tab, cfg.n, cfg.horizon, beta.tolist(), cfg.epsilon,
                                               rng_for(cfg.seed, rep), record=True)
    return TrajectorySample(np.array(times), np.array(states, dtype=int).reshape(-1, model.N),
                            np.array(occ), np.array(x) / cfg.n, logw, inside)


def _batch(args):
    model, cfg, reps, stop = args
    tab = _Tables(model, cfg.control)
    beta = _beta(model, cfg).tolist()
    out_w = np.empty(len(reps))
    out_in = np.empty(len(reps), dtype=bool)
    out_occ = np.empty((len(reps), model.n_facets))
    out_x = np.empty((len(reps), model.N))
    for k, rep in enumerate(reps):
        x, logw, occ, inside, _, _ = _run(tab, cfg.n, cfg.horizon, beta, cfg.epsilon,
                                          rng_for(cfg.seed, rep), stop_on_exit=stop)
        out_w[k], out_in[k], out_occ[k], out_x[k] = logw, inside, occ, x
    return out_w, out_in, out_occ, out_x


@dataclass
class Batch:
    log_weight: np.ndarray
    inside: np.ndarray
    occupation: np.ndarray
    terminal: np.ndarray  # scaled terminal states


def run_batch(model: LocalModel, cfg: SimConfig, threads: int = 1, stop_on_exit=False) -> Batch:
    """All replications of cfg; results are in replication order for any thread count."""
    reps = list(range(cfg.reps))
    if threads <= 1 or cfg.reps < 2 * threads:
        parts = [_batch((model, cfg, reps, stop_on_exit))]
    else:
        size = -(-cfg.reps // (4 * threads))
        chunks = [reps[i:i + size] for i in range(0, cfg.reps, size)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_batch, [(model, cfg, ch, stop_on_exit) for ch in chunks]))
    w, ins, occ, x = (np.concatenate([p[i] for p in parts]) for i in range(4))
    return Batch(w, ins, occ, x / cfg.n)


def _q(p, n):
    return -math.log(p) / n + 0.0 if p > 0 else math.inf  # + 0.0 folds -0.0


def estimate_tube_prob(model: LocalModel, cfg: SimConfig, threads: int = 1) -> TubeEstimate:
    """Fraction of paths of the original process staying strictly inside the tube."""
    if cfg.control is not None and not np.all(model.tilt(cfg.control) == 1.0):
        raise ValueError("naive estimation runs under the original rates; use is_estimate")
    b = run_batch(model, cfg, threads, stop_on_exit=True)
    p = float(np.mean(b.inside))
    se = math.sqrt(p * (1 - p) / cfg.reps)
    return TubeEstimate(p, se, _q(p, cfg.n), "naive", cfg.n, cfg.reps, flagged=p == 0)


def is_estimate(model: LocalModel, cfg: SimConfig, threads: int = 1) -> TubeEstimate:
    """Importance-sampling estimate under the tilted rates u = c r with likelihood weights."""
    b = run_batch(model, cfg, threads, stop_on_exit=True)
    lw = b.log_weight[b.inside]
    if len(lw) == 0:
        return TubeEstimate(0.0, 0.0, math.inf, "importance", cfg.n, cfg.reps, flagged=True)
    log_r = math.log(cfg.reps)
    log_p = float(logsumexp(lw)) - log_r
    log_m2 = float(logsumexp(2 * lw)) - log_r
    p = math.exp(log_p)
    var = max(math.exp(log_m2) - p * p, 0.0)
    return TubeEstimate(p, math.sqrt(var / cfg.reps), -log_p / cfg.n + 0.0, "importance", cfg.n,
                        cfg.reps)


def empirical_occupancy(samples) -> dict:
    """Mean fraction of time spent in each facet.

    Accepts a list of TrajectorySample (needs the model's K for labels via
    occupancy_labels) or a Batch; returns an array indexed by facet bitmask.
    """
    if isinstance(samples, Batch):
        occ = samples.occupation
    else:
        if not samples:
            raise ValueError("need at least one sample")
        occ = np.array([s.occupation for s in samples])
    frac = occ / occ.sum(axis=1, keepdims=True)
    return frac.mean(axis=0)


def occupancy_by_facet(model: LocalModel, samples) -> dict:
    return {model.facet(m): float(p) for m, p in enumerate(empirical_occupancy(samples))}


def occupancy_stderr(batch: Batch) -> np.ndarray:
    frac = batch.occupation / batch.occupation.sum(axis=1, keepdims=True)
    return frac.std(axis=0) / math.sqrt(len(frac))


@dataclass
class LLNReport:
    n: list
    exit_prob: list
    exit_se: list
    mean_terminal: list
    terminal_se: list
    monotone: bool
    terminal_ok: list
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.monotone and all(self.terminal_ok)

    def rows(self):
        for k, n in enumerate(self.n):
            yield {"n": n, "exit_prob": self.exit_prob[k], "exit_se": self.exit_se[k],
                   "mean_terminal": list(self.mean_terminal[k]),
                   "terminal_se": list(self.terminal_se[k]), "terminal_ok": self.terminal_ok[k]}


def lln_check(model: LocalModel, c, beta, n_list, reps: int, epsilon: float = 0.25, seed: int = 0,
              threads: int = 1) -> LLNReport:
    """Tube-exit probability and terminal mean of the tilted process for increasing n."""
    beta = np.asarray(beta, dtype=float)
    probs, ses, means, tses, ok = [], [], [], [], []
    for n in n_list:
        cfg = SimConfig(n=n, reps=reps, seed=seed, epsilon=epsilon, beta=beta, control=c)
        b = run_batch(model, cfg, threads)
        p = 1.0 - float(np.mean(b.inside))
        probs.append(p)
        ses.append(math.sqrt(p * (1 - p) / reps))
        mean = b.terminal.mean(axis=0)
        se = b.terminal.std(axis=0, ddof=1) / math.sqrt(reps)
        means.append(mean)
        tses.append(se)
        ok.append(bool(np.all(np.abs(mean - beta) <= 3 * se)))
    mono = all(probs[k + 1] <= probs[k] + 2 * math.hypot(ses[k], ses[k + 1])
               for k in range(len(probs) - 1))
    return LLNReport(list(n_list), probs, ses, means, tses, mono, ok)


def tube_probability_exact(model: LocalModel, n: int, beta: float, epsilon: float,
                           control=None, horizon: float = 1.0) -> float:
    """Tube probability of a one-dimensional local model from the master equation.

    States k with |k/n - t beta| < epsilon are alive; the generator restricted
    to them is exponentiated between the times the alive set changes.
    """
    if model.N != 1:
        raise ValueError("the master-equation oracle handles one-dimensional models")
    c = model.tilt(control)
    lo_k = 0 if model.K else -int(math.ceil((epsilon + abs(beta) * horizon) * n)) - 1
    hi_k = int(math.ceil((epsilon + abs(beta) * horizon) * n)) + 1
    states = np.arange(lo_k, hi_k + 1)
    idx = {k: i for i, k in enumerate(states)}
    S = len(states)
    Q = np.zeros((S, S))
    for k in states:
        m = 1 if (model.K and k == 0) else 0
        for j, v in enumerate(model.V):
            rate = n * c[j] * model.table[m, j]
            k2 = k + v[0]
            if rate == 0:
                continue
            Q[idx[k], idx[k]] -= rate
            if k2 in idx:
                Q[idx[k], idx[k2]] += rate
            # jumps beyond the truncated range leave the tube anyway

    def alive(t):
        return np.abs(states / n - t * beta) < epsilon

    # the alive set changes when k/n - t beta = +-epsilon
    events = {0.0, horizon}
    if beta != 0:
        for k in states:
            for s in (1, -1):
                t = (k / n - s * epsilon) / beta
                if 0 < t < horizon:
                    events.add(t)
    events = sorted(events)
    p = np.zeros(S)
    p[idx[0]] = 1.0
    p *= alive(0.0)
    for t0, t1 in zip(events[:-1], events[1:]):
        a = alive(0.5 * (t0 + t1))
        sub = Q[np.ix_(a, a)]
        q = p[a] @ expm(sub * (t1 - t0))
        p = np.zeros(S)
        p[a] = q
        p *= alive(t1) | (t1 == horizon)
    return float(p[alive(horizon)].sum())
