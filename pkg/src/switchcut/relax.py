"""Lower bounds from convex relaxations of the switching problem.

Three relaxations are provided:

* naive: binarity replaced by ``[0, 1]``, the switching budget kept through
  the usual absolute-value linearization with auxiliary variables ``z``;
* tailored: box plus alternating cutting planes, added one most violated
  cut at a time;
* Frank-Wolfe: conditional gradient over the convex hull of feasible
  patterns, driven by the exact combinatorial LMO.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fem_heat
from .fem_heat import Instance, ReducedQuadratic
from .qp import QuadraticModel, solve_qp
from .switch_poly import EPS_SEP, BoundedSwitchings, DwellTime, lmo, nearest_feasible, separate_alternating

log = logging.getLogger(__name__)

STOP_REL_CHANGE = 1e-3
STOP_STREAK = 3
MONOTONE_TOL = 1e-8


class BoundError(RuntimeError):
    """Internal consistency failure of a bounding procedure."""


@dataclass
class BoundReport:
    method: str
    lower_bound: float
    relaxed_solution: np.ndarray
    incumbent_value: Optional[float] = None
    incumbent: Optional[np.ndarray] = None
    cuts_added: int = 0
    cuts_to_exceed_naive: Optional[int] = None
    iterations: int = 0
    wall_time: float = 0.0
    converged: bool = True
    termination: str = ""
    history: list = field(default_factory=list)
    cuts: list = field(default_factory=list)


def _reduced(instance: Instance, rq: Optional[ReducedQuadratic]) -> ReducedQuadratic:
    return fem_heat.assemble_reduced_quadratic(instance) if rq is None else rq


def _incumbent(instance, rq, u_relaxed):
    constraint = instance.constraint
    if not isinstance(constraint, BoundedSwitchings):
        return None, None
    v = nearest_feasible(u_relaxed.reshape(rq.shape), constraint)
    return v, rq.value(v)


def box_model(rq: ReducedQuadratic) -> QuadraticModel:
    return QuadraticModel(rq.H, rq.g, rq.c)


def naive_model(rq: ReducedQuadratic, constraint: BoundedSwitchings) -> QuadraticModel:
    """Box relaxation plus the linearized switching budget.

    Variables are ``u`` (flattened ``(n, m)``) followed by one ``z`` per switch
    and interval transition, with ``z >= |u_i - u_{i-1}|`` and
    ``sum_j u_{j,0} [leading zero] + sum z <= sigma_max``.
    """
    n, m = rq.shape
    nu = n * m
    nz = n * (m - 1)
    N = nu + nz
    H = np.zeros((N, N))
    H[:nu, :nu] = rq.H
    g = np.concatenate([rq.g, np.zeros(nz)])
    rows = []
    for j in range(n):
        for i in range(1, m):
            zi = nu + j * (m - 1) + i - 1
            for sgn in (1.0, -1.0):
                a = np.zeros(N)
                a[j * m + i] = sgn
                a[j * m + i - 1] = -sgn
                a[zi] = -1.0
                rows.append(a)
    budget = np.zeros(N)
    budget[nu:] = 1.0
    if constraint.leading_zero:
        budget[np.arange(n) * m] = 1.0
    rows.append(budget)
    b = np.zeros(len(rows))
    b[-1] = constraint.sigma_max
    return QuadraticModel(H, g, rq.c, np.zeros(N), np.ones(N), np.array(rows), b)


def naive_relaxation(instance: Instance, rq: Optional[ReducedQuadratic] = None, tol: float = 1e-8):
    """Naive relaxation bound for a bounded-switching instance."""
    constraint = instance.constraint
    if not isinstance(constraint, BoundedSwitchings):
        raise TypeError("naive relaxation needs a BoundedSwitchings constraint")
    t0 = time.perf_counter()
    rq = _reduced(instance, rq)
    model = naive_model(rq, constraint)
    res = solve_qp(model, tol=tol)
    nu = rq.g.size
    u = np.clip(res.x[:nu], 0.0, 1.0)
    v, val = _incumbent(instance, rq, u)
    return BoundReport(
        method="naive",
        lower_bound=res.value,
        relaxed_solution=u.reshape(rq.shape),
        incumbent_value=val,
        incumbent=v,
        iterations=res.iterations,
        wall_time=time.perf_counter() - t0,
        termination="optimal",
        history=[res.value],
    )


def _warm_start(model: QuadraticModel, x_prev: np.ndarray) -> np.ndarray:
    """Largest feasible multiple of the previous optimum (the origin is feasible)."""
    lhs = model.A @ x_prev
    theta = 1.0
    over = lhs > model.b
    if np.any(over):
        theta = float(np.min(model.b[over] / lhs[over]))
    return np.clip(theta, 0.0, 1.0) * x_prev


def tailored_relaxation(
    instance: Instance,
    naive_bound: Optional[float] = None,
    rq: Optional[ReducedQuadratic] = None,
    tol: float = 1e-8,
    max_cuts: int = 10_000,
    callback=None,
    stall_stop: bool = True,
    eps: float = EPS_SEP,
) -> BoundReport:
    """Cutting-plane bound over box plus alternating inequalities.

    Stops when no violated cut remains or (with ``stall_stop``) when the
    relative bound change stays below 0.1% for three successive cuts.
    ``callback(iteration, bound, cuts)`` is invoked after every master solve.
    """
    constraint = instance.constraint
    if not isinstance(constraint, BoundedSwitchings) or not constraint.full_U:
        raise TypeError("tailored relaxation needs BoundedSwitchings with U = {0,1}^n")
    t0 = time.perf_counter()
    rq = _reduced(instance, rq)
    n, m = rq.shape
    model = box_model(rq)
    res = solve_qp(model, tol=tol)
    bound = res.value
    history = [bound]
    if callback:
        callback(0, bound, 0)
    cuts = []
    ex = None
    if naive_bound is not None and bound >= naive_bound:
        ex = 0
    streak = 0
    termination = "cut limit"
    while len(cuts) < max_cuts:
        u = res.x.reshape(n, m)
        cut = separate_alternating(u, constraint, eps)
        if cut is None:
            termination = "no violated cut"
            break
        cuts.append(cut)
        model = model.add_row(cut.row(n, m), cut.rhs)
        x0 = _warm_start(model, res.x)
        res = solve_qp(model, tol=tol, x0=x0, working_set=res.working_set)
        new = res.value
        if new < bound - MONOTONE_TOL * max(1.0, abs(bound)):
            raise BoundError(f"cutting-plane bound decreased from {bound} to {new}")
        change = (new - bound) / max(abs(new), 1e-12)
        bound = max(bound, new)
        history.append(bound)
        if callback:
            callback(len(cuts), bound, len(cuts))
        if ex is None and naive_bound is not None and bound >= naive_bound:
            ex = len(cuts)
        streak = streak + 1 if change < STOP_REL_CHANGE else 0
        if stall_stop and streak >= STOP_STREAK:
            termination = "stalled"
            break
    u = np.clip(res.x, 0.0, 1.0)
    v, val = _incumbent(instance, rq, u)
    return BoundReport(
        method="tailored",
        lower_bound=bound,
        relaxed_solution=u.reshape(n, m),
        incumbent_value=val,
        incumbent=v,
        cuts_added=len(cuts),
        cuts_to_exceed_naive=ex,
        iterations=len(history),
        wall_time=time.perf_counter() - t0,
        termination=termination,
        history=history,
        cuts=cuts,
    )


class _QuadraticOracle:
    """Value, gradient and curvature of ``f`` with or without a dense Hessian."""

    def __init__(self, instance: Optional[Instance], rq: Optional[ReducedQuadratic]):
        self.instance = instance
        self.rq = rq
        self.shape = rq.shape if rq is not None else (instance.n, instance.m)

    def value(self, x):
        if self.rq is not None:
            return self.rq.value(x)
        return fem_heat.objective(self.instance, x.reshape(self.shape))

    def gradient(self, x):
        if self.rq is not None:
            return self.rq.gradient(x)
        return fem_heat.reduced_gradient(self.instance, x.reshape(self.shape)).ravel()

    def curvature(self, x, d, fx, gx):
        """``d^T H d``."""
        if self.rq is not None:
            return float(d @ self.rq.H @ d)
        return 2.0 * (self.value(x + d) - fx - gx @ d)


def frank_wolfe(
    oracle,
    constraint,
    tol: float = 1e-4,
    max_iter: int = 5000,
    prefix=None,
    track_vertices: bool = False,
    cutoff: float = np.inf,
):
    """Conditional gradient with exact line search on a quadratic.

    Iterations also stop once the certified bound reaches ``cutoff`` (used
    for pruning in branch-and-bound).

    Returns a dict with the final iterate ``x``, its value ``f``, the certified
    lower bound ``lower`` (best ``f(x_k) - gap_k``), ``iterations``,
    ``converged`` and, with ``track_vertices``, the best LMO vertex seen as
    ``vertex`` / ``vertex_value``.
    """
    shape = oracle.shape
    x = np.zeros(int(np.prod(shape)))
    p, _ = lmo(oracle.gradient(x).reshape(shape), constraint, prefix)
    if p is None:
        return dict(x=None, f=np.inf, lower=np.inf, iterations=0, converged=True,
                    vertex=None, vertex_value=np.inf)
    x = p.astype(float).ravel()
    fx = oracle.value(x)
    vertex, vertex_value = x.copy(), fx
    lower = -np.inf
    converged = False
    it = 0
    for it in range(max_iter + 1):
        gx = oracle.gradient(x)
        p, _ = lmo(gx.reshape(shape), constraint, prefix)
        p = p.astype(float).ravel()
        d = p - x
        gap = -float(gx @ d)
        lower = max(lower, fx - gap)
        if track_vertices:
            fp = oracle.value(p)
            if fp < vertex_value:
                vertex, vertex_value = p.copy(), fp
        if gap <= tol * (1.0 + abs(fx)):
            converged = True
            break
        if lower >= cutoff:
            break
        if it == max_iter:
            break
        curv = oracle.curvature(x, d, fx, gx)
        gamma = 1.0 if curv <= 0 else min(1.0, max(0.0, gap / curv))
        x = x + gamma * d
        fx = oracle.value(x)
    return dict(x=x, f=fx, lower=lower, iterations=it, converged=converged,
                vertex=vertex, vertex_value=vertex_value)


def frank_wolfe_bound(
    instance: Instance,
    tol: float = 1e-4,
    max_iter: int = 5000,
    rq: Optional[ReducedQuadratic] = None,
) -> BoundReport:
    """Certified lower bound on ``min f`` over the convex hull of feasible patterns.

    Uses the dense quadratic when ``n * m`` is within the dense limit and
    falls back to adjoint gradients otherwise.
    """
    t0 = time.perf_counter()
    constraint = instance.constraint
    if rq is None and instance.n * instance.m <= fem_heat.MAX_DENSE_VARIABLES:
        rq = fem_heat.assemble_reduced_quadratic(instance)
    oracle = _QuadraticOracle(instance, rq)
    out = frank_wolfe(oracle, constraint, tol=tol, max_iter=max_iter)
    x, lower, it, converged = out["x"], out["lower"], out["iterations"], out["converged"]
    if not converged:
        log.warning("Frank-Wolfe stopped after %d iterations without reaching the gap tolerance", it)
    v = val = None
    if isinstance(constraint, BoundedSwitchings):
        v = nearest_feasible(x.reshape(oracle.shape), constraint)
        val = oracle.value(v.ravel().astype(float))
    return BoundReport(
        method="fw",
        lower_bound=lower,
        relaxed_solution=x.reshape(oracle.shape),
        incumbent_value=val,
        incumbent=v,
        iterations=it,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        termination="gap" if converged else "iteration cap",
    )


def linear_frank_wolfe_bound(c, constraint, tol: float = 1e-12) -> BoundReport:
    """Frank-Wolfe on the linear objective ``c . x`` (a single LMO call suffices)."""

    class _Linear:
        shape = (1, np.size(c)) if isinstance(constraint, DwellTime) else np.shape(np.atleast_2d(c))

        def value(self, x):
            return float(np.ravel(c) @ x)

        def gradient(self, x):
            return np.ravel(c).astype(float)

        def curvature(self, x, d, fx, gx):
            return 0.0

    out = frank_wolfe(_Linear(), constraint, tol=tol, max_iter=10)
    return BoundReport(
        method="fw", lower_bound=out["lower"], relaxed_solution=out["x"].reshape(_Linear.shape),
        iterations=out["iterations"], converged=out["converged"],
    )
