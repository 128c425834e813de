"""Global minimization over feasible binary switching patterns.

Small feasible sets are enumerated outright. Otherwise a depth-first
branch-and-bound fixes the pattern one interval at a time; node bounds come
from Frank-Wolfe over the convex hull of the patterns that share the fixed
prefix, which the dynamic-programming LMO handles by pinning those columns.
"""
from __future__ import annotations

import time
from typing import NamedTuple, Optional

import numpy as np

from . import fem_heat
from .fem_heat import Instance, ReducedQuadratic
from .relax import _QuadraticOracle, frank_wolfe
from .switch_poly import (
    DEFAULT_CAP,
    BoundedSwitchings,
    CapExceededError,
    enumerate_patterns,
    nearest_feasible,
)

PRUNE_TOL = 1e-9
NODE_CAP = 10**7
TIE_TOL = 1e-12
ENUM_CHUNK = 4096


class ExactResult(NamedTuple):
    pattern: np.ndarray
    value: float
    nodes: int = 0
    method: str = "enum"
    wall_time: float = 0.0


class NodeLimitError(RuntimeError):
    """Branch-and-bound hit its node cap; carries the best incumbent found."""

    def __init__(self, pattern, value, nodes):
        super().__init__(f"node cap reached after {nodes} nodes, best value {value}")
        self.pattern = pattern
        self.value = value
        self.nodes = nodes


def _reduced(instance: Instance, rq: Optional[ReducedQuadratic]) -> ReducedQuadratic:
    return fem_heat.assemble_reduced_quadratic(instance) if rq is None else rq


def pattern_values(rq: ReducedQuadratic, patterns) -> np.ndarray:
    """``f`` on a stack of patterns, evaluated in vectorized chunks."""
    X = np.asarray(patterns, dtype=float).reshape(len(patterns), -1)
    out = np.empty(X.shape[0])
    for lo in range(0, X.shape[0], ENUM_CHUNK):
        B = X[lo : lo + ENUM_CHUNK]
        out[lo : lo + ENUM_CHUNK] = (
            0.5 * np.einsum("pi,pi->p", B @ rq.H, B) + B @ rq.g + rq.c
        )
    return out


def solve_exact_enum(
    instance: Instance, rq: Optional[ReducedQuadratic] = None, cap: int = DEFAULT_CAP
) -> ExactResult:
    """Exact minimizer by evaluating ``f`` on every feasible pattern.

    Raises :class:`~switchcut.switch_poly.CapExceededError` when there are
    more than ``cap`` patterns. Ties go to the lexicographically smallest
    pattern in time-major order.
    """
    t0 = time.perf_counter()
    rq = _reduced(instance, rq)
    patterns = enumerate_patterns(instance.constraint, cap=cap, m=instance.m)
    if not patterns:
        raise ValueError("constraint admits no feasible pattern")
    vals = pattern_values(rq, patterns)
    best = vals.min()
    # enumeration order is already lexicographic, so the first near-minimum wins
    k = int(np.flatnonzero(vals <= best + TIE_TOL * (1.0 + abs(best)))[0])
    return ExactResult(
        patterns[k].copy(), float(vals[k]), len(patterns), "enum", time.perf_counter() - t0
    )


def solve_exact_bnb(
    instance: Instance,
    rq: Optional[ReducedQuadratic] = None,
    node_cap: int = NODE_CAP,
    fw_iter: int = 200,
    fw_tol: float = 1e-6,
) -> ExactResult:
    """Depth-first branch-and-bound over interval columns in time order.

    Children that keep the current column are explored first. A node is
    pruned when its certified Frank-Wolfe bound reaches the incumbent value
    minus ``1e-9``.
    """
    constraint = instance.constraint
    if not isinstance(constraint, BoundedSwitchings):
        raise TypeError("branch-and-bound needs a BoundedSwitchings constraint")
    t0 = time.perf_counter()
    if rq is None and instance.n * instance.m <= fem_heat.MAX_DENSE_VARIABLES:
        rq = fem_heat.assemble_reduced_quadratic(instance)
    oracle = _QuadraticOracle(instance, rq)
    n, m = oracle.shape
    U = np.array(constraint.U, dtype=int)
    dist = np.abs(U[:, None, :] - U[None, :, :]).sum(axis=2)
    start_cost = U.sum(axis=1) if constraint.leading_zero else np.zeros(len(U), dtype=int)

    def value(v):
        return oracle.value(np.asarray(v, dtype=float).ravel())

    root = frank_wolfe(oracle, constraint, tol=fw_tol, max_iter=fw_iter, track_vertices=True)
    if root["x"] is None:
        raise ValueError("constraint admits no feasible pattern")
    inc = nearest_feasible(root["x"].reshape(n, m), constraint)
    inc_val = value(inc)
    if root["vertex_value"] < inc_val:
        inc, inc_val = root["vertex"].reshape(n, m).astype(int), root["vertex_value"]

    nodes = 1
    # stack entries: (prefix column indices, switchings used, parent bound)
    stack = []
    if root["lower"] < inc_val - PRUNE_TOL:
        stack.append(((), 0, root["lower"]))

    def children(prefix, used):
        cost = dist[prefix[-1]] if prefix else start_cost
        order = sorted(range(len(U)), key=lambda w: (cost[w], w))
        return [(prefix + (w,), used + int(cost[w])) for w in order if used + cost[w] <= constraint.sigma_max]

    first = True
    while stack:
        prefix, used, parent = stack.pop()
        if parent >= inc_val - PRUNE_TOL:
            continue
        if not first:
            nodes += 1
            if nodes > node_cap:
                raise NodeLimitError(inc, inc_val, nodes)
            fixed = U[list(prefix)].T
            if len(prefix) == m:
                val = value(fixed)
                if val < inc_val:
                    inc, inc_val = fixed.copy(), val
                continue
            out = frank_wolfe(
                oracle, constraint, tol=fw_tol, max_iter=fw_iter, prefix=fixed,
                track_vertices=True, cutoff=inc_val - PRUNE_TOL,
            )
            if out["x"] is None:
                continue
            if out["vertex_value"] < inc_val:
                inc = out["vertex"].reshape(n, m).astype(int)
                inc_val = out["vertex_value"]
            bound = max(out["lower"], parent)
            if bound >= inc_val - PRUNE_TOL:
                continue
        else:
            bound = parent
            first = False
        # push in reverse so the preferred child is explored first
        for child in reversed(children(prefix, used)):
            stack.append((child[0], child[1], bound))

    return ExactResult(
        np.asarray(inc, dtype=int).reshape(n, m), float(inc_val), nodes, "bnb",
        time.perf_counter() - t0,
    )


def solve_exact(
    instance: Instance, rq: Optional[ReducedQuadratic] = None, cap: int = DEFAULT_CAP
) -> ExactResult:
    """Enumeration when the feasible set has at most ``cap`` patterns, else branch-and-bound."""
    try:
        return solve_exact_enum(instance, rq, cap)
    except CapExceededError:
        return solve_exact_bnb(instance, rq)
