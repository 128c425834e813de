"""Primal active-set method for small dense convex QPs.

    minimize    1/2 x^T H x + g^T x + c
    subject to  A x <= b,  lb <= x <= ub

``H`` only needs to be positive semidefinite; directions of zero curvature
are followed until a constraint blocks, which requires a bounded feasible
region.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog


class QPError(RuntimeError):
    def __init__(self, message, residual=None):
        if residual is not None:
            message = f"{message} (best KKT residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


@dataclass
class QuadraticModel:
    H: np.ndarray
    g: np.ndarray
    c: float = 0.0
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.g.size
        self.H = np.asarray(self.H, dtype=float)
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.ones(n) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.A is None:
            self.A = np.zeros((0, n))
            self.b = np.zeros(0)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float)).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.A.shape[0] != self.b.size:
            raise ValueError("A and b have inconsistent row counts")

    @property
    def n(self) -> int:
        return self.g.size

    def value(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.g @ x + self.c)

    def add_row(self, a, rhs) -> "QuadraticModel":
        return QuadraticModel(
            self.H, self.g, self.c, self.lb, self.ub,
            np.vstack([self.A, a]), np.append(self.b, rhs),
        )

    def rows(self):
        """All constraints stacked as ``G x <= h`` (general rows, upper, lower)."""
        n = self.n
        G = np.vstack([self.A, np.eye(n), -np.eye(n)])
        h = np.concatenate([self.b, self.ub, -self.lb])
        return G, h


@dataclass
class QPResult:
    x: np.ndarray
    value: float
    multipliers: np.ndarray  # for the rows of QuadraticModel.rows()
    working_set: list
    iterations: int
    kkt_residual: float
    extra: dict = field(default_factory=dict)

    def row_multipliers(self, model: QuadraticModel) -> np.ndarray:
        return self.multipliers[: model.A.shape[0]]


def kkt_residual(model: QuadraticModel, x, lam) -> float:
    G, h = model.rows()
    slack = G @ x - h
    stat = model.H @ x + model.g + G.T @ lam
    return float(
        max(
            np.abs(stat).max(initial=0.0),
            np.maximum(slack, 0.0).max(initial=0.0),
            np.maximum(-lam, 0.0).max(initial=0.0),
            np.abs(lam * slack).max(initial=0.0),
        )
    )


def _feasible_point(model: QuadraticModel, tol: float) -> np.ndarray:
    G, h = model.rows()
    x = np.clip(np.zeros(model.n), model.lb, model.ub)
    if np.all(G @ x <= h + tol):
        return x
    res = linprog(
        np.zeros(model.n), A_ub=model.A, b_ub=model.b,
        bounds=list(zip(model.lb, model.ub)), method="highs",
    )
    if res.status != 0:
        raise QPError("quadratic model is infeasible")
    return res.x


def _independent_active(G, h, x, tol, candidates=None):
    """Greedy linearly independent subset of the constraints active at ``x``."""
    slack = G @ x - h
    order = np.flatnonzero(np.abs(slack) <= tol) if candidates is None else candidates
    W = []
    for i in order:
        if abs(slack[i]) > tol:
            continue
        trial = G[W + [int(i)]]
        if np.linalg.matrix_rank(trial, tol=1e-10) == len(W) + 1:
            W.append(int(i))
    return W


def solve_qp(
    model: QuadraticModel,
    tol: float = 1e-8,
    x0: Optional[np.ndarray] = None,
    working_set: Optional[list] = None,
    max_iter: int = 10_000,
) -> QPResult:
    """Solve ``model`` to a KKT residual of at most ``tol`` (max norm).

    ``x0`` must be feasible if given; ``working_set`` is a hint of row indices
    (into :meth:`QuadraticModel.rows`) that are kept when active at ``x0``.
    """
    G, h = model.rows()
    H, g = model.H, model.g
    n = model.n
    feas_tol = 1e-12 * (1.0 + np.abs(h).max(initial=0.0))

    if x0 is None:
        x = _feasible_point(model, tol)
    else:
        x = np.asarray(x0, dtype=float).copy()
        if np.any(G @ x > h + 1e-9):
            raise QPError("starting point is infeasible")
    x = np.clip(x, model.lb, model.ub)

    W = _independent_active(G, h, x, 1e-10, working_set)
    if working_set is not None:
        extra = _independent_active(G, h, x, 1e-10)
        for i in extra:
            if i not in W and np.linalg.matrix_rank(G[W + [i]], tol=1e-10) == len(W) + 1:
                W.append(i)

    lam_full = np.zeros(G.shape[0])
    for it in range(1, max_iter + 1):
        grad = H @ x + g
        AW = G[W]
        Z = sla.null_space(AW, rcond=1e-12) if W else np.eye(n)

        p = np.zeros(n)
        unbounded = False
        if Z.shape[1]:
            Hr = Z.T @ H @ Z
            gr = Z.T @ grad
            ev, Q = np.linalg.eigh(0.5 * (Hr + Hr.T))
            pos = ev > 1e-11 * max(1.0, ev.max(initial=0.0))
            gn = Q[:, ~pos].T @ gr
            if gn.size and np.abs(gn).max() > 1e-12 * (1.0 + np.abs(grad).max()):
                # descent along a direction of zero curvature
                p = -Z @ (Q[:, ~pos] @ gn)
                unbounded = True
            else:
                p = -Z @ (Q[:, pos] @ ((Q[:, pos].T @ gr) / ev[pos]))

        if not unbounded and np.abs(p).max(initial=0.0) <= 1e-13 * (1.0 + np.abs(x).max()):
            if W:
                lam_w, *_ = np.linalg.lstsq(AW.T, -grad, rcond=None)
            else:
                lam_w = np.zeros(0)
            lam_full = np.zeros(G.shape[0])
            lam_full[W] = lam_w
            if lam_w.size == 0 or lam_w.min() >= -0.1 * tol:
                lam_full = np.maximum(lam_full, 0.0)
                res = kkt_residual(model, x, lam_full)
                if res <= tol:
                    return QPResult(x, model.value(x), lam_full, list(W), it, res)
                raise QPError("active-set method stalled", res)
            W.pop(int(np.argmin(lam_w)))
            continue

        Gp = G @ p
        slack = h - G @ x
        alpha = np.inf if unbounded else 1.0
        block = None
        mask = Gp > 1e-14 * (1.0 + np.abs(p).max())
        mask[W] = False
        if np.any(mask):
            ratios = np.maximum(slack[mask], 0.0) / Gp[mask]
            k = int(np.argmin(ratios))
            if ratios[k] < alpha:
                alpha = ratios[k]
                block = int(np.flatnonzero(mask)[k])
        if not np.isfinite(alpha):
            raise QPError("quadratic model is unbounded along a zero-curvature direction")
        x = x + alpha * p
        if block is not None:
            W.append(block)
            # snap onto the blocking constraint to stop drift
            viol = G[block] @ x - h[block]
            if viol > 0:
                x -= viol * G[block] / (G[block] @ G[block])
        if np.any(G @ x > h + 1e-9 + feas_tol):
            raise QPError("active-set iterate left the feasible region")

    lam_full = np.maximum(lam_full, 0.0)
    raise QPError("iteration cap reached", kkt_residual(model, x, lam_full))
