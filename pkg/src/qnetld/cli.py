"""Command-line front end.

Exit codes: 0 ok, 1 validation failure, 2 solver non-convergence,
3 I/O or parse error.  Index sets and coordinates are 0-based.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .jsonfmt import csv_float, dumps
from .local import localize
from .model import (FIXTURES, SpecError, check_communication, facet_index, load_spec,
                    spec_to_dict, validate)
from .oracles import brute_force_L
from .paths import PiecewisePath, path_rate
from .rates import SolverError, local_rate
from .sim import SimConfig, empirical_occupancy, estimate_tube_prob, is_estimate, run_batch
from .skorokhod import (SPError, check_condition4, ps_transform_check, regularity_Q, solve_sp,
                        sp_for, sp_for_local)

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3
SCENARIOS = ("mm1-verify",)


class InputError(Exception):
    """Unreadable or malformed input (exit code 3)."""


class ValidationFailure(Exception):
    """Input parsed but violates a model invariant (exit code 1)."""


# --- input helpers --------------------------------------------------------

def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.replace(" ", "").split(",") if x != ""]
    except ValueError as exc:
        raise InputError(f"cannot parse number list {text!r}") from exc


def _ints(text: str) -> list:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x != ""]
    except ValueError as exc:
        raise InputError(f"cannot parse index list {text!r}") from exc


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc


def _load_spec(path):
    try:
        return load_spec(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc
    except SpecError as exc:
        raise InputError(str(exc)) from exc


def _valid_spec(path):
    spec = _load_spec(path)
    problems = validate(spec)
    if problems:
        raise ValidationFailure("; ".join(problems))
    return spec


def _index_set(spec, K=None, point=None) -> tuple:
    if K is not None and point is not None:
        raise InputError("give either an index set or a base point, not both")
    if point is not None:
        x = np.asarray(point, dtype=float)
        if x.shape != (spec.N,):
            raise InputError(f"point needs {spec.N} coordinates")
        if np.any(x < 0):
            raise ValidationFailure("base point must lie in the orthant")
        return facet_index(x)
    K = tuple(K or ())
    if any(k < 0 or k >= spec.N for k in K):
        raise InputError(f"index set {list(K)} not within 0..{spec.N - 1}")
    return tuple(sorted(set(K)))


def _beta(spec, beta):
    b = np.zeros(spec.N) if beta is None else np.asarray(beta, dtype=float)
    if b.shape != (spec.N,):
        raise InputError(f"beta needs {spec.N} coordinates")
    return b


def _tilt_from_pairs(pairs):
    if isinstance(pairs, dict) and "c" in pairs:
        pairs = pairs["c"]
    if not isinstance(pairs, list):
        raise InputError("tilt file must hold a list of [direction, c] pairs")
    try:
        return {tuple(int(x) for x in v): float(c) for v, c in pairs}
    except (TypeError, ValueError) as exc:
        raise InputError(f"malformed tilt entry ({exc})") from exc


def _resolve_tilt(spec, how, K=(), beta=None):
    """Tilt from 'unit', 'from-solver' (needs beta) or a JSON file of [direction, c] pairs."""
    if how in (None, "unit"):
        return None
    if how == "from-solver":
        sol = local_rate(spec, K, _beta(spec, beta))
        if not np.isfinite(sol.value):
            raise ValidationFailure("velocity is not attainable: no optimal tilt exists")
        c = sol.c_array()
        if np.any(~np.isfinite(c)) or np.any(c <= 0):
            raise ValidationFailure("optimal tilt is not strictly positive")
        return sol.c
    return _tilt_from_pairs(_read_json(how))


# --- manifest and output --------------------------------------------------

def _digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _input_digest(path) -> str:
    p = Path(str(path))
    if p.exists():
        return _digest_bytes(p.read_bytes())
    if str(path) in FIXTURES:
        return _digest_bytes(resources.files("qnetld").joinpath("data", f"{path}.json").read_bytes())
    if str(path) in SCENARIOS:
        return _digest_bytes(resources.files("qnetld").joinpath("data", f"{path}.json").read_bytes())
    return "missing"


@dataclass
class RunManifest:
    command: str
    inputs: dict
    version: str
    seed: int
    args: dict
    started: float = field(default_factory=time.time)
    wall_clock: float = 0.0
    outputs: list = field(default_factory=list)

    @property
    def digest(self) -> str:
        # identifies the run by what determines its results, not by when it ran
        key = dumps({"command": self.command, "inputs": self.inputs, "version": self.version,
                     "seed": self.seed, "args": self.args}, indent=None)
        return _digest_bytes(key.encode())[:16]

    def to_dict(self):
        return {"digest": self.digest, "command": self.command, "inputs": self.inputs,
                "version": self.version, "seed": self.seed, "args": self.args,
                "wall_clock": self.wall_clock, "outputs": self.outputs}


class Output:
    """Collects artifacts; prints the primary one and writes all of them to --out-dir."""

    def __init__(self, args, manifest: RunManifest, stdout=None):
        self.args = args
        self.manifest = manifest
        self.stdout = stdout or sys.stdout
        self.artifacts = []  # (name, kind, payload)

    def json(self, name, obj, primary=False):
        self.artifacts.append((name, "json", obj, primary))

    def csv(self, name, header, rows, primary=False):
        self.artifacts.append((name, "csv", (header, rows), primary))

    def _render(self, kind, payload, with_digest):
        if kind == "json":
            obj = dict(payload) if isinstance(payload, dict) else {"data": payload}
            if with_digest:
                obj["manifest"] = self.manifest.digest
            return dumps(obj) + "\n"
        header, rows = payload
        buf = io.StringIO()
        if with_digest:
            buf.write(f"# manifest {self.manifest.digest}\n")
        buf.write(",".join(header) + "\n")
        for row in rows:
            buf.write(",".join(_cell(x) for x in row) + "\n")
        return buf.getvalue()

    def flush(self):
        fmt = getattr(self.args, "format", None)
        primary = [a for a in self.artifacts if a[3]] or self.artifacts[:1]
        chosen = primary
        if fmt is not None:
            same = [a for a in self.artifacts if a[1] == fmt]
            chosen = [a for a in primary if a[1] == fmt] or same[:1] or primary
        for name, kind, payload, _ in chosen:
            self.stdout.write(self._render(kind, payload, with_digest=False))
        out_dir = getattr(self.args, "out_dir", None)
        if out_dir:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            for name, kind, payload, _ in self.artifacts:
                path = out / f"{name}.{kind}"
                _atomic_write(path, self._render(kind, payload, with_digest=True))
                self.manifest.outputs.append(str(path))
            self.manifest.wall_clock = time.time() - self.manifest.started
            _atomic_write(out / "manifest.json", dumps(self.manifest.to_dict()) + "\n")


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return csv_float(x)
    if isinstance(x, (list, tuple)):
        return " ".join(_cell(v) for v in x)
    return str(x)


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _label(v) -> str:
    return "(" + " ".join(str(int(x)) for x in v) + ")"


# --- commands -------------------------------------------------------------

def cmd_validate(args, out: Output) -> int:
    spec = _load_spec(args.spec)
    problems = validate(spec)
    comm = None
    if not problems:
        box = range(args.box + 1)
        pairs = 0
        worst = 0
        for x in itertools.product(box, repeat=spec.N):
            for y in itertools.product(box, repeat=spec.N) if spec.N <= 2 else [tuple([0] * spec.N)]:
                res = check_communication(spec, x, y)
                pairs += 1
                if not res.reachable:
                    problems.append(f"communication fails from {list(x)} to {list(y)}: {res.failing_step}")
                    break
                worst = max(worst, res.length)
        comm = {"pairs_checked": pairs, "longest_path": worst}
    out.json("validate", {"valid": not problems, "violations": problems,
                          "spec": spec_to_dict(spec), "communication": comm}, primary=True)
    return EXIT_OK if not problems else EXIT_INVALID


def cmd_dump_local(args, out: Output) -> int:
    spec = _valid_spec(args.spec)
    K = _index_set(spec, args.K, args.point)
    model = localize(spec, K)
    rows = [(m, _label(v), float(model.table[m, j]))
            for m in range(model.n_facets) for j, v in enumerate(model.V)]
    out.csv("local", ["I_bitmask", "v", "rate"], rows, primary=True)
    out.json("local", {"K": list(K), "V": [list(v) for v in model.V],
                       "facets": [list(model.facet(m)) for m in range(model.n_facets)],
                       "table": model.table})
    return EXIT_OK


def _sweep_grid(spec, text):
    parts = text.split(",")
    if len(parts) != spec.N:
        raise InputError(f"--sweep needs {spec.N} comma-separated lo:hi:num ranges")
    axes = []
    for p in parts:
        try:
            lo, hi, num = p.split(":")
            axes.append(np.linspace(float(lo), float(hi), int(num)))
        except ValueError as exc:
            raise InputError(f"cannot parse sweep range {p!r}") from exc
    return [np.array(b) for b in itertools.product(*axes)]


def _rate_task(args):
    spec, K, beta = args
    try:
        sol = local_rate(spec, K, beta)
        return sol.value, sol.status
    except SolverError as exc:
        return math.nan, f"error: {exc}"


def cmd_rate(args, out: Output) -> int:
    spec = _valid_spec(args.spec)
    K = _index_set(spec, args.K, args.point)
    beta = _beta(spec, args.beta)
    sol = local_rate(spec, K, beta)
    payload = sol.to_dict()
    model = localize(spec, K)
    if args.oracle:
        payload["oracle"] = brute_force_L(model, beta, args.resolution)
    out.json("rate", payload, primary=not args.sweep)
    row = [*beta.tolist(), sol.value, sol.status]
    out.csv("rate", [f"beta{i}" for i in range(spec.N)] + ["L", "status"], [row])
    code = EXIT_OK
    if args.sweep:
        grid = _sweep_grid(spec, args.sweep)
        tasks = [(spec, K, b) for b in grid]
        if args.threads > 1:
            with ProcessPoolExecutor(max_workers=args.threads) as pool:
                results = list(pool.map(_rate_task, tasks))
        else:
            results = [_rate_task(t) for t in tasks]
        rows = [[*b.tolist(), v, s] for b, (v, s) in zip(grid, results)]
        out.csv("sweep", [f"beta{i}" for i in range(spec.N)] + ["L", "status"], rows, primary=True)
        if any(s.startswith("error") for _, s in results):
            code = EXIT_SOLVER
    return code


def cmd_path_rate(args, out: Output) -> int:
    spec = _valid_spec(args.spec)
    phi = _read_path(args.path, spec.N)
    try:
        res = path_rate(spec, phi)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from exc
    rows = [[s.t0, s.t1, " ".join(map(str, s.K)), list(s.beta), s.value, s.cost]
            for s in res.segments]
    out.json("path_rate", {"value": res.value, "segments": [
        {"t0": s.t0, "t1": s.t1, "K": list(s.K), "beta": list(s.beta), "L": s.value,
         "cost": s.cost} for s in res.segments]}, primary=True)
    out.csv("segments", ["t0", "t1", "K", "beta", "L", "cost"], rows)
    return EXIT_OK


def _read_path(path, N):
    data = _read_json(path)
    try:
        phi = PiecewisePath.from_pairs(data)
    except (TypeError, ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed path ({exc})") from exc
    if phi.N != N:
        raise InputError(f"{path}: path has dimension {phi.N}, network has {N}")
    return phi


def cmd_sp(args, out: Output) -> int:
    spec = _valid_spec(args.spec)
    K = _index_set(spec, args.K, args.point) if (args.K or args.point) else tuple(range(spec.N))
    c = _resolve_tilt(spec, args.tilt, K, args.beta)
    sp = sp_for_local(localize(spec, K), c)
    if sp is None:
        raise ValidationFailure("empty index set: the local model has no boundary")
    psi = _read_path(args.path, spec.N)
    sol = solve_sp(sp, psi, args.dt)
    N = spec.N
    header = ["t"] + [f"phi{i}" for i in range(N)] + [f"eta{i}" for i in range(N)]
    rows = [[t, *p.tolist(), *e.tolist()] for t, p, e in zip(sol.t, sol.phi, sol.eta)]
    out.csv("sp", header, rows, primary=True)
    out.json("sp_report", {"verification": sol.report, "total_variation": sol.total_variation,
                           "normals": sp.normals, "directions": sp.dirs})
    return EXIT_OK


def cmd_sp_check(args, out: Output) -> int:
    spec = _valid_spec(args.spec)
    K = _index_set(spec, args.K, args.point) if (args.K or args.point) else tuple(range(spec.N))
    c = _resolve_tilt(spec, args.tilt, K, args.beta)
    model = localize(spec, K)
    sp = sp_for(spec, c)
    Q, regular = regularity_Q(sp)
    report = check_condition4(model, c, sp)
    payload = {"normals": sp.normals, "directions": sp.dirs,
               "Q": None if Q is None else Q.Q,
               "spectral_radius": None if Q is None else Q.spectral_radius,
               "regular": regular, "condition4": report.to_dict()}
    if sp.kind == "ps":
        payload["transform_deviation"] = ps_transform_check(spec, c, sp)
    out.json("sp_check", payload, primary=True)
    return EXIT_OK if report.passed and regular is not False else EXIT_INVALID


def _sim_setup(args):
    spec = _valid_spec(args.spec)
    K = _index_set(spec, args.K, args.point)
    beta = _beta(spec, args.beta)
    if any(abs(beta[k]) > 1e-12 for k in K):
        raise ValidationFailure("beta must vanish on the constrained coordinates")
    c = _resolve_tilt(spec, args.tilt, K, beta)
    return spec, K, beta, c


def cmd_simulate(args, out: Output) -> int:
    spec, K, beta, c = _sim_setup(args)
    model = localize(spec, K)
    rows = []
    results = []
    for n in args.n:
        cfg = SimConfig(n=n, reps=args.reps, seed=args.seed, epsilon=args.epsilon, beta=beta,
                        control=c)
        est = (estimate_tube_prob if c is None else is_estimate)(model, cfg, args.threads)
        results.append(est.to_dict())
        rows.append([n, est.p_hat, est.std_error, est.q_hat, est.method, int(est.flagged)])
    L = local_rate(spec, K, beta).value
    payload = {"K": list(K), "beta": beta, "epsilon": args.epsilon, "L": L,
               "estimates": results}
    if len(results) == 1:
        payload.update(results[0])
    out.json("simulate", payload, primary=True)
    out.csv("simulate", ["n", "pHat", "standardError", "qHat", "method", "flagged"], rows)
    return EXIT_OK


def cmd_occupancy(args, out: Output) -> int:
    spec, K, beta, c = _sim_setup(args)
    model = localize(spec, K)
    rows = []
    for n in args.n:
        cfg = SimConfig(n=n, reps=args.reps, seed=args.seed, epsilon=args.epsilon, beta=beta,
                        control=c)
        occ = empirical_occupancy(run_batch(model, cfg, args.threads))
        for m, p in enumerate(occ):
            rows.append([n, m, " ".join(map(str, model.facet(m))), float(p)])
    out.csv("occupancy", ["n", "I_bitmask", "I", "rho_hat"], rows, primary=True)
    return EXIT_OK


# --- report ---------------------------------------------------------------

TASKS = {}


def _parser_for(task):
    return TASKS[task][1]


def _run_task(task: dict, default_spec, seed, threads) -> dict:
    """Run one scenario task in-process; returns its entry for the bundle."""
    name = task.get("task")
    if name not in TASKS:
        return {"task": name, "status": "error", "exit_code": EXIT_IO,
                "error": f"unknown task {name!r}"}
    argv = [str(x) for x in task.get("args", [])]
    if "spec" in task:
        argv = [str(task["spec"])] + argv
    elif default_spec is not None:
        argv = [str(default_spec)] + argv
    func, sub = TASKS[name]
    try:
        args = sub.parse_args(argv)
    except SystemExit:
        return {"task": name, "status": "error", "exit_code": EXIT_IO,
                "error": f"bad arguments {argv}"}
    args.seed = task.get("seed", seed)
    args.threads = threads
    args.format = "json"
    args.out_dir = None
    buf = io.StringIO()
    out = Output(args, RunManifest(name, {}, __version__, args.seed, {}), stdout=buf)
    code = _guarded(func, args, out)
    entry = {"task": name, "args": argv, "exit_code": code,
             "status": "ok" if code == EXIT_OK else "error"}
    if code in (EXIT_OK, EXIT_INVALID):
        for aname, kind, payload, primary in out.artifacts:
            if kind == "json" and primary:
                entry["result"] = payload
    else:
        entry["error"] = out.error
    return entry


def _cross_links(entries):
    """Table pairing each simulated decay rate with the local rate it estimates."""
    table = []
    for e in entries:
        res = e.get("result")
        if e["task"] == "simulate" and res is not None:
            for est in res["estimates"]:
                table.append({"n": est["n"], "L": res["L"], "qHat": est["qHat"],
                              "method": est["method"],
                              "abs_diff": None if est["qHat"] is None or res["L"] is None
                              or not math.isfinite(res["L"]) else abs(est["qHat"] - res["L"])})
    return table


def load_scenario(path):
    if not Path(str(path)).exists() and str(path) in SCENARIOS:
        text = resources.files("qnetld").joinpath("data", f"{path}.json").read_text()
        return json.loads(text)
    data = _read_json(path)
    if not isinstance(data, list):
        raise InputError(f"{path}: scenario must be a JSON list of tasks")
    return data


def cmd_report(args, out: Output) -> int:
    tasks = load_scenario(args.scenario)
    entries = [_run_task(t if isinstance(t, dict) else {"task": None}, args.spec, args.seed,
                         args.threads) for t in tasks]
    table = _cross_links(entries)
    out.json("report", {"scenario": str(args.scenario), "tasks": entries, "table": table},
             primary=True)
    out.csv("report_table", ["n", "L", "qHat", "method", "abs_diff"],
            [[r["n"], r["L"], r["qHat"], r["method"], r["abs_diff"]] for r in table])
    codes = [e["exit_code"] for e in entries if e["exit_code"] != EXIT_OK]
    return max(codes) if codes else EXIT_OK


# --- parser ---------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out-dir", default=argparse.SUPPRESS)
    p.add_argument("--format", choices=("json", "csv"), default=argparse.SUPPRESS)


def _add_location(p):
    p.add_argument("--K", type=_ints, default=None, help="constrained coordinates, e.g. 0,1")
    p.add_argument("--point", type=_floats, default=None, help="base point x; K = zeros of x")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qnetld", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out-dir", default=None)
    parser.add_argument("--format", choices=("json", "csv"), default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a network spec")
    p.add_argument("spec")
    p.add_argument("--box", type=int, default=5, help="check communication on [0, box]^N")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("dump-local", help="facet rate table of a local model as CSV")
    p.add_argument("spec")
    _add_location(p)
    p.set_defaults(func=cmd_dump_local)

    p = sub.add_parser("rate", help="local rate L(beta)")
    p.add_argument("spec")
    _add_location(p)
    p.add_argument("--beta", type=_floats, default=None)
    p.add_argument("--sweep", default=None, help="lo:hi:num per coordinate, comma-separated")
    p.add_argument("--oracle", action="store_true", help="also run the grid-search oracle")
    p.add_argument("--resolution", type=float, default=0.01)
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("path-rate", help="rate of a piecewise-linear path")
    p.add_argument("spec")
    p.add_argument("path", help="JSON [[t, [x...]], ...]")
    p.set_defaults(func=cmd_path_rate)

    p = sub.add_parser("sp", help="solve the reflection problem for an input path")
    p.add_argument("spec")
    p.add_argument("path")
    _add_location(p)
    p.add_argument("--tilt", default="unit", help="unit | from-solver | tilt JSON file")
    p.add_argument("--beta", type=_floats, default=None, help="velocity for --tilt from-solver")
    p.add_argument("--dt", type=float, default=1e-3)
    p.set_defaults(func=cmd_sp)

    p = sub.add_parser("sp-check", help="Q matrix, spectral radius and facet cone checks")
    p.add_argument("spec")
    _add_location(p)
    p.add_argument("--tilt", default="unit")
    p.add_argument("--beta", type=_floats, default=None)
    p.set_defaults(func=cmd_sp_check)

    for name, func, helptext in (("simulate", cmd_simulate, "tube probability estimate"),
                                 ("occupancy", cmd_occupancy, "empirical facet occupancies")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("spec")
        _add_location(p)
        p.add_argument("--beta", type=_floats, default=None)
        p.add_argument("--epsilon", type=float, default=0.1)
        p.add_argument("--n", type=_ints, default=[40], help="scaling parameters, comma-separated")
        p.add_argument("--reps", type=int, default=1000)
        p.add_argument("--tilt", default="unit", help="unit | from-solver | tilt JSON file")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="run a scenario of tasks and cross-link the results")
    p.add_argument("scenario", help="scenario JSON file or bundled name (mm1-verify)")
    p.add_argument("--spec", default=None, help="default spec for tasks that name none")
    p.set_defaults(func=cmd_report)

    for name, sp in sub.choices.items():
        _add_common(sp)
        TASKS[name] = (sp.get_default("func"), sp)
    return parser


def _guarded(func, args, out: Output) -> int:
    out.error = None
    try:
        return func(args, out)
    except (InputError, SpecError, OSError) as exc:
        out.error = str(exc)
        return EXIT_IO
    except ValidationFailure as exc:
        out.error = str(exc)
        return EXIT_INVALID
    except (SolverError, SPError) as exc:
        out.error = str(exc)
        return EXIT_SOLVER


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code else EXIT_OK
    inputs = {}
    for key in ("spec", "path", "scenario"):
        val = getattr(args, key, None)
        if val is not None:
            inputs[key] = {"path": str(val), "sha256": _input_digest(val)}
    tilt = getattr(args, "tilt", None)
    if tilt not in (None, "unit", "from-solver"):
        inputs["tilt"] = {"path": tilt, "sha256": _input_digest(tilt)}
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "out_dir")}
    manifest = RunManifest(args.command, inputs, __version__, args.seed,
                           json.loads(json.dumps(flags, default=str)))
    out = Output(args, manifest)
    code = _guarded(args.func, args, out)
    if out.error is not None:
        print(f"qnetld {args.command}: {out.error}", file=sys.stderr)
    try:
        out.flush()
    except OSError as exc:
        print(f"qnetld: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
