"""Benchmark harness: configured instances, solver runs and Table-style CSV output.

A run covers a list of ``(n_x, n_t)`` grids. For each grid the exact solver
and the requested relaxations are run on the coarse discretization, every
returned control is re-evaluated on a fine discretization, and one CSV row is
written per method. Gap columns use the fine-grid exact objective.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fem_heat, global_solver, relax
from .fem_heat import Instance, Problem
from .switch_poly import BoundedSwitchings, DwellTime, separate_alternating

log = logging.getLogger(__name__)

CSV_HEADER = [
    "nx", "nt", "method", "objective", "bound", "gap_pct", "filled_gap_pct",
    "cuts", "cuts_to_exceed_naive", "iterations", "wall_time_s", "error",
]
METHODS = ("exact", "naive", "tailored", "fw")
THREADS_ENV = "SWITCHCUT_THREADS"
ORDER_TOL = 1e-6


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


# ---------------------------------------------------------------------------
# problem data

def benchmark_psi(x, y):
    return 12.0 * np.pi**2 * np.exp(x + y) * np.sin(np.pi * x) * np.sin(np.pi * y)


def benchmark_yd(t, x, y):
    return 2.0 * np.pi**2 * max(np.cos(2.0 * np.pi * t), 0.0) * np.sin(np.pi * x) * np.sin(np.pi * y)


def _sine_y0(amplitude):
    def y0(x, y):
        return amplitude * np.sin(np.pi * x) * np.sin(np.pi * y)
    return y0


# ---------------------------------------------------------------------------
# configuration

@dataclass
class Config:
    grid: list = field(default_factory=lambda: [(10, 20)])
    T: float = 2.0
    sigma_max: int = 2
    alpha: float = 0.0
    constraint: dict = field(default_factory=lambda: {"kind": "bounded"})
    y0: object = "zero"
    theta: float = 1.0
    yd_time: str = "quadrature"
    n_x_fine: int = 100
    n_t_fine: int = 200
    tolerances: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: ["exact", "naive", "tailored"])
    output: dict = field(default_factory=dict)
    seed: int = 0
    exact_cap: int = 10**6

    @property
    def tol(self) -> dict:
        t = dict(qp=1e-8, fw=1e-4, fw_max_iter=5000, separation=1e-8,
                 max_cuts=10_000, stall_stop=True)
        t.update(self.tolerances)
        return t


_TOL_KEYS = {"qp", "fw", "fw_max_iter", "separation", "max_cuts", "stall_stop"}
_OUTPUT_KEYS = {"csv", "log"}
_CONFIG_KEYS = {
    "n_x", "n_t", "grid", "T", "sigma_max", "alpha", "constraint", "y0", "theta",
    "yd_time", "n_x_fine", "n_t_fine", "tolerances", "methods", "output", "seed",
    "exact_cap",
}


def _int(name, value, minimum):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(name, f"must be >= {minimum}, got {value}")
    return value


def _num(name, value, minimum=None, strict=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(name, f"expected a finite number, got {value!r}")
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigError(name, f"must be {'>' if strict else '>='} {minimum}, got {value}")
    return float(value)


def _int_list(name, value, minimum):
    items = value if isinstance(value, list) else [value]
    if not items:
        raise ConfigError(name, "must not be empty")
    return [_int(name, v, minimum) for v in items]


def parse_config(data: dict) -> Config:
    """Validate a decoded JSON document and build a :class:`Config`."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(data) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    cfg = Config()

    if "grid" in data:
        if "n_x" in data or "n_t" in data:
            raise ConfigError("grid", "give either 'grid' or 'n_x'/'n_t', not both")
        if not isinstance(data["grid"], list) or not data["grid"]:
            raise ConfigError("grid", "expected a non-empty list of [n_x, n_t] pairs")
        grid = []
        for pair in data["grid"]:
            if not isinstance(pair, list) or len(pair) != 2:
                raise ConfigError("grid", f"expected [n_x, n_t], got {pair!r}")
            grid.append((_int("grid", pair[0], 3), _int("grid", pair[1], 1)))
        cfg.grid = grid
    elif "n_x" in data or "n_t" in data:
        nxs = _int_list("n_x", data.get("n_x", 10), 3)
        nts = _int_list("n_t", data.get("n_t", 20), 1)
        cfg.grid = [(a, b) for a in nxs for b in nts]

    if "T" in data:
        cfg.T = _num("T", data["T"], 0.0, strict=True)
    if "sigma_max" in data:
        cfg.sigma_max = _int("sigma_max", data["sigma_max"], 0)
    if "alpha" in data:
        cfg.alpha = _num("alpha", data["alpha"], 0.0)
    if "theta" in data:
        cfg.theta = _num("theta", data["theta"])
        if not 0.5 <= cfg.theta <= 1.0:
            raise ConfigError("theta", f"must lie in [0.5, 1], got {cfg.theta}")
    if "yd_time" in data:
        if data["yd_time"] not in ("quadrature", "interpolate"):
            raise ConfigError("yd_time", f"expected 'quadrature' or 'interpolate', got {data['yd_time']!r}")
        cfg.yd_time = data["yd_time"]
    if "n_x_fine" in data:
        cfg.n_x_fine = _int("n_x_fine", data["n_x_fine"], 3)
    if "n_t_fine" in data:
        cfg.n_t_fine = _int("n_t_fine", data["n_t_fine"], 1)
    for _, nt in cfg.grid:
        if cfg.n_t_fine % nt:
            raise ConfigError("n_t", f"n_t={nt} does not divide n_t_fine={cfg.n_t_fine}")
    if "seed" in data:
        cfg.seed = _int("seed", data["seed"], 0)
    if "exact_cap" in data:
        cfg.exact_cap = _int("exact_cap", data["exact_cap"], 1)

    if "y0" in data:
        y0 = data["y0"]
        if y0 in (None, "zero"):
            cfg.y0 = "zero"
        elif isinstance(y0, dict) and set(y0) == {"kind", "amplitude"} and y0["kind"] == "sine":
            _num("y0", y0["amplitude"])
            cfg.y0 = dict(y0)
        else:
            raise ConfigError("y0", "expected 'zero' or {\"kind\": \"sine\", \"amplitude\": a}")

    if "constraint" in data:
        cfg.constraint = _parse_constraint(data["constraint"])

    if "tolerances" in data:
        tol = data["tolerances"]
        if not isinstance(tol, dict):
            raise ConfigError("tolerances", "expected an object")
        bad = sorted(set(tol) - _TOL_KEYS)
        if bad:
            raise ConfigError(f"tolerances.{bad[0]}", "unknown field")
        for k, v in tol.items():
            if k in ("fw_max_iter", "max_cuts"):
                _int(f"tolerances.{k}", v, 1)
            elif k == "stall_stop":
                if not isinstance(v, bool):
                    raise ConfigError("tolerances.stall_stop", "expected true or false")
            else:
                _num(f"tolerances.{k}", v, 0.0, strict=True)
        cfg.tolerances = dict(tol)

    if "methods" in data:
        methods = data["methods"]
        if not isinstance(methods, list) or not methods:
            raise ConfigError("methods", "expected a non-empty list")
        for mth in methods:
            if mth not in METHODS:
                raise ConfigError("methods", f"unknown method {mth!r}; choose from {list(METHODS)}")
        cfg.methods = [m for m in METHODS if m in methods]

    if "output" in data:
        out = data["output"]
        if not isinstance(out, dict):
            raise ConfigError("output", "expected an object")
        bad = sorted(set(out) - _OUTPUT_KEYS)
        if bad:
            raise ConfigError(f"output.{bad[0]}", "unknown field")
        for k, v in out.items():
            if not isinstance(v, str) or not v:
                raise ConfigError(f"output.{k}", "expected a file path")
        cfg.output = dict(out)
    return cfg


def _parse_constraint(c) -> dict:
    if not isinstance(c, dict) or "kind" not in c:
        raise ConfigError("constraint", "expected an object with a 'kind'")
    kind = c["kind"]
    if kind == "bounded":
        bad = sorted(set(c) - {"kind", "U", "leading_zero"})
        if bad:
            raise ConfigError(f"constraint.{bad[0]}", "unknown field")
        out = {"kind": "bounded", "leading_zero": True, "U": None}
        if "leading_zero" in c:
            if not isinstance(c["leading_zero"], bool):
                raise ConfigError("constraint.leading_zero", "expected true or false")
            out["leading_zero"] = c["leading_zero"]
        if c.get("U") is not None:
            U = c["U"]
            if not isinstance(U, list) or not U:
                raise ConfigError("constraint.U", "expected a non-empty list of 0/1 vectors")
            for w in U:
                if not isinstance(w, list) or len(w) != 1 or any(b not in (0, 1) or isinstance(b, bool) for b in w):
                    raise ConfigError(
                        "constraint.U",
                        f"expected 0/1 vectors of length 1 (the built-in instance has one switch), got {w!r}",
                    )
            out["U"] = [tuple(w) for w in U]
        return out
    if kind == "dwell":
        bad = sorted(set(c) - {"kind", "s"})
        if bad:
            raise ConfigError(f"constraint.{bad[0]}", "unknown field")
        if "s" not in c:
            raise ConfigError("constraint.s", "dwell constraint needs a minimum dwell time s")
        return {"kind": "dwell", "s": _num("constraint.s", c["s"], 0.0, strict=True)}
    raise ConfigError("constraint.kind", f"expected 'bounded' or 'dwell', got {kind!r}")


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(data)


# ---------------------------------------------------------------------------
# instances

def benchmark_problem(cfg: Config) -> Problem:
    y0 = None if cfg.y0 == "zero" else _sine_y0(float(cfg.y0["amplitude"]))
    return Problem(
        psi=(benchmark_psi,), y_d=benchmark_yd, y0=y0, T=cfg.T, alpha=cfg.alpha,
        yd_time=cfg.yd_time, theta=cfg.theta,
    )


def make_constraint(cfg: Config, m: int, T: float):
    c = cfg.constraint
    if c["kind"] == "dwell":
        return DwellTime(c["s"], fem_heat.TimeGrid(T, m))
    return BoundedSwitchings(cfg.sigma_max, n=1, U=c.get("U"), leading_zero=c.get("leading_zero", True))


def build_benchmark_instance(cfg: Config, n_x: Optional[int] = None, n_t: Optional[int] = None,
                         problem: Optional[Problem] = None) -> Instance:
    """Instance on one grid of ``cfg`` (the first grid unless sizes are given)."""
    if n_x is None or n_t is None:
        n_x, n_t = cfg.grid[0]
    problem = benchmark_problem(cfg) if problem is None else problem
    return Instance(problem, n_x, n_t, make_constraint(cfg, n_t, problem.T))


# ---------------------------------------------------------------------------
# table arithmetic

def gap_percent(obj_exact, bound):
    """Relative distance of a bound below the exact objective, in percent."""
    return 100.0 * (obj_exact - bound) / obj_exact


def filled_gap_percent(obj_exact, naive, tailored):
    """Share of the exact-minus-naive gap closed by the tailored bound, in percent."""
    return 100.0 * (tailored - naive) / (obj_exact - naive)


# ---------------------------------------------------------------------------
# runs

@dataclass
class ResultRow:
    nx: int
    nt: int
    method: str
    objective: Optional[float] = None
    bound: Optional[float] = None
    gap_pct: Optional[float] = None
    filled_gap_pct: Optional[float] = None
    cuts: Optional[int] = None
    cuts_to_exceed_naive: Optional[int] = None
    iterations: Optional[int] = None
    wall_time_s: Optional[float] = None
    error: str = ""
    # coarse-grid values used for the invariant checks, not written to the CSV
    coarse_objective: Optional[float] = None
    coarse_bound: Optional[float] = None

    def cells(self) -> list:
        def num(x):
            return "" if x is None else f"{x:.6g}"

        def pct(x):
            return "" if x is None else f"{x:.2f}"

        def integer(x):
            return "" if x is None else str(int(x))

        return [
            str(self.nx), str(self.nt), self.method, num(self.objective), num(self.bound),
            pct(self.gap_pct), pct(self.filled_gap_pct), integer(self.cuts),
            integer(self.cuts_to_exceed_naive), integer(self.iterations),
            num(self.wall_time_s), self.error,
        ]


@dataclass
class BenchmarkResult:
    rows: list
    log: list
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()


class _FineEvaluator:
    """Lazily built, shared fine-grid instance."""

    def __init__(self, problem: Problem, n_x: int, m: int):
        self.problem, self.n_x, self.m = problem, n_x, m
        self._inst = None
        self._lock = threading.Lock()

    def __call__(self, coarse: Instance, u) -> float:
        with self._lock:
            if self._inst is None:
                self._inst = Instance(self.problem, self.n_x, self.m)
        return fem_heat.evaluate_fine(coarse, u, self.n_x, self.m, fine=self._inst)


def _run_cell(cfg: Config, problem: Problem, n_x: int, n_t: int, fine: _FineEvaluator):
    """All requested methods on one grid; returns (rows, log records)."""
    tol = cfg.tol
    records = []
    rows = {m: ResultRow(n_x, n_t, m) for m in cfg.methods}
    try:
        inst = build_benchmark_instance(cfg, n_x, n_t, problem)
        rq = fem_heat.assemble_reduced_quadratic(inst)
    except Exception as exc:  # the whole cell fails
        for r in rows.values():
            r.error = f"{type(exc).__name__}: {exc}"
        return list(rows.values()), records

    def guarded(method, fn):
        t0 = time.perf_counter()
        try:
            fn(rows[method])
        except Exception as exc:
            log.exception("%s failed on grid (%d, %d)", method, n_x, n_t)
            rows[method].error = f"{type(exc).__name__}: {exc}"
        rows[method].wall_time_s = time.perf_counter() - t0

    def do_exact(row):
        if isinstance(inst.constraint, DwellTime):
            res = global_solver.solve_exact_enum(inst, rq, cfg.exact_cap)
        else:
            res = global_solver.solve_exact(inst, rq, cfg.exact_cap)
        row.coarse_objective = row.coarse_bound = res.value
        row.objective = row.bound = fine(inst, res.pattern)
        row.iterations = res.nodes

    def relaxation_row(row, rep):
        row.coarse_bound = rep.lower_bound
        row.bound = fine(inst, rep.relaxed_solution)
        if rep.incumbent is not None:
            row.coarse_objective = rep.incumbent_value
            row.objective = fine(inst, rep.incumbent)
        row.iterations = rep.iterations
        if rep.lower_bound > (rep.incumbent_value if rep.incumbent_value is not None else math.inf) + 1e-8:
            row.error = "rounded incumbent below the lower bound"

    naive_bound = [None]

    def do_naive(row):
        rep = relax.naive_relaxation(inst, rq=rq, tol=tol["qp"])
        naive_bound[0] = rep.lower_bound
        relaxation_row(row, rep)

    def do_tailored(row):
        def cb(it, bound, cuts):
            records.append(dict(nx=n_x, nt=n_t, method="tailored", iteration=it,
                                bound=round(bound, 12), cuts=cuts))

        rep = relax.tailored_relaxation(
            inst, naive_bound=naive_bound[0], rq=rq, tol=tol["qp"], max_cuts=tol["max_cuts"],
            callback=cb, stall_stop=tol["stall_stop"], eps=tol["separation"],
        )
        relaxation_row(row, rep)
        row.cuts = rep.cuts_added
        row.cuts_to_exceed_naive = rep.cuts_to_exceed_naive
        records.append(dict(nx=n_x, nt=n_t, method="tailored", termination=rep.termination))

    def do_fw(row):
        rep = relax.frank_wolfe_bound(inst, tol=tol["fw"], max_iter=tol["fw_max_iter"], rq=rq)
        relaxation_row(row, rep)
        if not rep.converged:
            row.error = "iteration cap reached; bound is certified but not converged"

    for method, fn in (("exact", do_exact), ("naive", do_naive),
                       ("tailored", do_tailored), ("fw", do_fw)):
        if method in rows:
            guarded(method, fn)

    # table arithmetic on the fine-grid values
    ex = rows.get("exact")
    obj = ex.objective if ex is not None and not ex.error else None
    nv = rows.get("naive")
    naive_fine = nv.bound if nv is not None and not nv.error else None
    for r in rows.values():
        if obj is not None and r.bound is not None:
            r.gap_pct = gap_percent(obj, r.bound)
        if r.method in ("tailored", "fw") and obj is not None and naive_fine is not None \
                and r.bound is not None and not _vacuous(inst):
            if abs(obj - naive_fine) > 1e-12 * max(1.0, abs(obj)):
                r.filled_gap_pct = filled_gap_percent(obj, naive_fine, r.bound)

    for r in rows.values():
        records.append(dict(nx=n_x, nt=n_t, method=r.method, event="coarse",
                            coarse_objective=r.coarse_objective, coarse_bound=r.coarse_bound))
    return [rows[m] for m in cfg.methods], records


def _vacuous(inst: Instance) -> bool:
    """True when the switching budget cannot bind (filled gap undefined)."""
    c = inst.constraint
    if not isinstance(c, BoundedSwitchings):
        return False
    most = inst.n * (inst.m - 1) + (inst.n if c.leading_zero else 0)
    return c.sigma_max >= most


def check_invariants(rows) -> list:
    """Bound-ordering and filled-gap checks; returns human-readable violations."""
    out = []
    by_grid = {}
    for r in rows:
        by_grid.setdefault((r.nx, r.nt), {})[r.method] = r
    for (nx, nt), rs in sorted(by_grid.items()):
        def cb(m):
            r = rs.get(m)
            return None if r is None or r.error and m != "fw" else r.coarse_bound

        naive, tail, fw, exact = cb("naive"), cb("tailored"), cb("fw"), cb("exact")
        if naive is not None and tail is not None and naive > tail + ORDER_TOL:
            out.append(f"({nx},{nt}): naive bound {naive} exceeds tailored bound {tail}")
        for name, b in (("naive", naive), ("tailored", tail), ("fw", fw)):
            if b is not None and exact is not None and b > exact + ORDER_TOL:
                out.append(f"({nx},{nt}): {name} bound {b} exceeds exact value {exact}")
        for r in rs.values():
            if r.filled_gap_pct is not None and not -1e-9 <= r.filled_gap_pct <= 100.0 + 1e-9:
                out.append(f"({nx},{nt}): {r.method} filled gap {r.filled_gap_pct:.2f}% outside [0, 100]")
    return out


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1


def run_benchmark(cfg: Config, problem: Optional[Problem] = None, write: bool = True) -> BenchmarkResult:
    """Run every grid of ``cfg`` and (with ``write``) write the CSV and log files.

    ``problem`` overrides the built-in instance data. Grid cells run on up to
    ``$SWITCHCUT_THREADS`` threads; rows are emitted in (n_x, n_t, method)
    order regardless of completion order.
    """
    problem = benchmark_problem(cfg) if problem is None else problem
    fine = _FineEvaluator(problem, cfg.n_x_fine, cfg.n_t_fine)
    grids = sorted(set(cfg.grid))
    workers = min(_thread_count(), len(grids))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda g: _run_cell(cfg, problem, g[0], g[1], fine), grids))
    else:
        results = [_run_cell(cfg, problem, nx, nt, fine) for nx, nt in grids]

    rows, records = [], [dict(event="config", seed=cfg.seed, methods=cfg.methods, theta=cfg.theta)]
    for r, rec in results:
        rows.extend(r)
        records.extend(rec)
    violations = check_invariants(rows)
    for v in violations:
        log.error("invariant violated: %s", v)
    result = BenchmarkResult(rows, records, violations)

    if write:
        csv_path = cfg.output.get("csv", "results.csv")
        log_path = cfg.output.get("log", "convergence.jsonl")
        for path in (csv_path, log_path):
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(result.csv_text())
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# separation introspection

class PointFileError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def read_point(path) -> np.ndarray:
    """One value in [0, 1] per line; blank lines are ignored."""
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text:
                continue
            try:
                x = float(text)
            except ValueError:
                raise PointFileError(path, lineno, f"cannot parse {text!r} as a number") from None
            if not (0.0 <= x <= 1.0):
                raise PointFileError(path, lineno, f"value {x} outside [0, 1]")
            values.append(x)
    if not values:
        raise PointFileError(path, 1, "no values found")
    return np.array(values)


def separate_debug(cfg: Config, point) -> str:
    """Describe the most violated alternating cut at ``point`` (1-based indices)."""
    if cfg.constraint["kind"] != "bounded":
        raise ConfigError("constraint.kind", "separation needs a bounded-switching constraint")
    v = np.asarray(point, dtype=float)
    constraint = make_constraint(cfg, v.size, cfg.T)
    if not constraint.full_U:
        raise ConfigError("constraint.U", "separation needs U = {0, 1}")
    cut = separate_alternating(v[None, :], constraint, cfg.tol["separation"])
    if cut is None:
        return "feasible for all known cuts"
    idx = " ".join(str(i + 1) for i in cut.indices)
    signs = " ".join("+1" if s > 0 else "-1" for s in cut.signs)
    return (
        f"violated alternating cut\n"
        f"  indices:   {idx}\n"
        f"  signs:     {signs}\n"
        f"  rhs:       {cut.rhs:g}\n"
        f"  violation: {cut.violation(v[None, :]):.6g}"
    )
