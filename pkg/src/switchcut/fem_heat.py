"""P1 finite elements and theta-scheme time stepping for the switched heat equation.

The state equation is

    d/dt y - Laplace(y) = sum_j u_j(t) psi_j(x)   on [0,1]^2 x (0,T),
    y = 0 on the boundary,  y(0) = y0,

and the objective is ``1/2 ||y - y_d||^2_{L2(Q)} + alpha/2 ||u - 1/2||^2``.
Controls are piecewise constant on a uniform time grid, the state is
continuous and piecewise linear in time between the nodal values produced by
the theta scheme (Crank-Nicolson by default). Since the control-to-state map is
affine, the discrete objective is an explicit convex quadratic in ``u``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

ScalarField = Callable[[np.ndarray, np.ndarray], np.ndarray]
SpaceTimeField = Callable[[float, np.ndarray, np.ndarray], np.ndarray]

MAX_DENSE_VARIABLES = 4096
SOLVE_RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    """A linear solve did not reach the residual tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class SizeGuardError(ValueError):
    pass


class SpaceMesh:
    """Uniform triangulation of the unit square with ``n_x`` nodes per side.

    Every grid square is split along the same diagonal, so an interior node
    touches six triangles.
    """

    def __init__(self, n_x: int):
        if n_x < 3:
            raise ValueError(f"n_x must be >= 3, got {n_x}")
        self.n_x = int(n_x)
        self.h = 1.0 / (n_x - 1)
        s = np.linspace(0.0, 1.0, n_x)
        xx, yy = np.meshgrid(s, s, indexing="xy")
        self.coords = np.column_stack([xx.ravel(), yy.ravel()])

        idx = np.arange(n_x * n_x).reshape(n_x, n_x)  # idx[iy, ix]
        a = idx[:-1, :-1].ravel()
        b = idx[:-1, 1:].ravel()
        c = idx[1:, 1:].ravel()
        d = idx[1:, :-1].ravel()
        self.triangles = np.concatenate(
            [np.column_stack([a, b, c]), np.column_stack([a, c, d])]
        )

        on_boundary = (
            np.isclose(self.coords[:, 0], 0.0)
            | np.isclose(self.coords[:, 0], 1.0)
            | np.isclose(self.coords[:, 1], 0.0)
            | np.isclose(self.coords[:, 1], 1.0)
        )
        self.interior = np.flatnonzero(~on_boundary)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_interior(self) -> int:
        return self.interior.size

    def triangle_areas(self) -> np.ndarray:
        p = self.coords[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, T]`` into ``m`` intervals."""

    T: float
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.m

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.m + 1)

    @property
    def intervals(self) -> list[tuple[float, float]]:
        t = self.nodes
        return [(t[i], t[i + 1]) for i in range(self.m)]


def assemble_fem(mesh: SpaceMesh):
    """Assemble P1 mass and stiffness matrices.

    Returns
    -------
    M, K : scipy.sparse.csr_matrix
        Matrices over all nodes.
    M_int, K_int : scipy.sparse.csr_matrix
        The same matrices restricted to interior nodes (homogeneous Dirichlet
        conditions eliminated).
    """
    tri = mesh.triangles
    p = mesh.coords[tri]
    area = mesh.triangle_areas()

    # gradients of the barycentric coordinates
    x, y = p[:, :, 0], p[:, :, 1]
    bx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    by = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    ke = (bx[:, :, None] * bx[:, None, :] + by[:, :, None] * by[:, None, :]) / (
        4.0 * area[:, None, None]
    )
    me = (np.ones((3, 3)) + np.eye(3))[None] * (area / 12.0)[:, None, None]

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_nodes
    M = sp.coo_matrix((me.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    inner = mesh.interior
    return M, K, M[inner][:, inner].tocsr(), K[inner][:, inner].tocsr()


def assemble_load(mesh: SpaceMesh, psi: ScalarField) -> np.ndarray:
    """Load vector ``b_i = int psi phi_i`` over all nodes.

    Uses the edge-midpoint rule per triangle, which is exact for quadratics.
    """
    tri = mesh.triangles
    p = mesh.coords[tri]
    area = mesh.triangle_areas()
    # midpoint k lies opposite vertex k
    mids = 0.5 * (p[:, [1, 2, 0]] + p[:, [2, 0, 1]])
    fm = np.asarray(psi(mids[..., 0], mids[..., 1]), dtype=float)
    fm = np.broadcast_to(fm, mids.shape[:2])
    # vertex i has value 1/2 at the two midpoints adjacent to it
    contrib = (area / 3.0)[:, None] * 0.5 * (fm.sum(axis=1, keepdims=True) - fm)
    return np.bincount(tri.ravel(), weights=contrib.ravel(), minlength=mesh.n_nodes)


def time_quadrature(grid: TimeGrid, order: int = 5, pieces: int = 4):
    """Composite Gauss-Legendre points and weights aligned with ``grid``.

    Returns ``(t, w, k, s)``: points, weights, owning interval index and
    local coordinate ``s`` in ``[0, 1]`` within that interval.
    """
    xg, wg = np.polynomial.legendre.leggauss(order)
    sub = (np.arange(pieces)[:, None] + 0.5 * (xg[None, :] + 1.0)) / pieces
    s = sub.ravel()
    ws = np.tile(wg, pieces) / (2.0 * pieces)
    dt = grid.dt
    k = np.repeat(np.arange(grid.m), s.size)
    s = np.tile(s, grid.m)
    t = (k + s) * dt
    w = np.tile(ws, grid.m) * dt
    return t, w, k, s


def time_mass_weights(grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal and off-diagonal of the P1 time mass matrix on ``grid``."""
    dt = grid.dt
    diag = np.full(grid.m + 1, 2.0 * dt / 3.0)
    diag[[0, -1]] = dt / 3.0
    off = np.full(grid.m, dt / 6.0)
    return diag, off


@dataclass(frozen=True)
class Problem:
    """Continuous problem data from which discrete instances are built."""

    psi: Sequence[ScalarField]
    y_d: SpaceTimeField
    y0: Optional[ScalarField] = None
    T: float = 2.0
    alpha: float = 0.0
    # "quadrature": Gauss quadrature of y_d in time; "interpolate": use the
    # piecewise linear interpolant of its samples at the time nodes
    yd_time: str = "quadrature"
    # time stepping weight: 0.5 is Crank-Nicolson, 1.0 implicit Euler
    theta: float = 0.5

    def __post_init__(self):
        if self.yd_time not in ("quadrature", "interpolate"):
            raise ValueError(f"unknown yd_time mode {self.yd_time!r}")
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0.5, 1], got {self.theta}")

    @property
    def n(self) -> int:
        return len(self.psi)


class Instance:
    """Discretized control problem on a given mesh and time grid.

    Attributes are treated as immutable after construction.
    """

    def __init__(self, problem: Problem, n_x: int, m: int, constraint=None):
        if problem.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {problem.alpha}")
        self.problem = problem
        self.mesh = SpaceMesh(n_x)
        self.grid = TimeGrid(problem.T, m)
        self.alpha = float(problem.alpha)
        self.constraint = constraint

        _, _, self.M, self.K = assemble_fem(self.mesh)
        inner = self.mesh.interior
        xy = self.mesh.coords[inner]
        self.loads = np.array(
            [assemble_load(self.mesh, f)[inner] for f in problem.psi]
        ).reshape(problem.n, inner.size)
        def sample(t):
            return np.broadcast_to(problem.y_d(t, xy[:, 0], xy[:, 1]), (inner.size,))

        self.y_d = np.array([sample(t) for t in self.grid.nodes], dtype=float)
        # y_d enters through its moments against the time hat functions and
        # its own squared norm (space: nodal interpolant)
        tq, wq, kq, sq = time_quadrature(self.grid)
        if problem.yd_time == "quadrature":
            ydq = np.array([sample(t) for t in tq], dtype=float)
        else:
            ydq = (1.0 - sq)[:, None] * self.y_d[kq] + sq[:, None] * self.y_d[kq + 1]
        Mydq = (self.M @ ydq.T).T
        moments = np.zeros((self.grid.m + 1, inner.size))
        np.add.at(moments, kq, (wq * (1.0 - sq))[:, None] * Mydq)
        np.add.at(moments, kq + 1, (wq * sq)[:, None] * Mydq)
        self.yd_moments = moments  # already multiplied by M
        self.yd_norm2 = float(wq @ np.einsum("qi,qi->q", ydq, Mydq))
        if problem.y0 is None:
            self.y0 = np.zeros(inner.size)
        else:
            self.y0 = np.broadcast_to(
                np.asarray(problem.y0(xy[:, 0], xy[:, 1]), dtype=float), (inner.size,)
            ).copy()

        dt = self.grid.dt
        th = problem.theta
        self._lhs = (self.M / dt + th * self.K).tocsc()
        self._rhs = (self.M / dt - (1.0 - th) * self.K).tocsr()
        self._lu = spla.splu(self._lhs)
        self.w_diag, self.w_off = time_mass_weights(self.grid)

    @property
    def n(self) -> int:
        return self.loads.shape[0]

    @property
    def m(self) -> int:
        return self.grid.m

    @property
    def n_x(self) -> int:
        return self.mesh.n_x

    def with_constraint(self, constraint) -> "Instance":
        other = object.__new__(Instance)
        other.__dict__.update(self.__dict__)
        other.constraint = constraint
        return other

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(rhs)
        res = self._lhs @ x - rhs
        scale = 1.0 + np.abs(rhs).max()
        err = np.abs(res).max() / scale
        if not np.isfinite(err) or err > SOLVE_RESIDUAL_TOL:
            raise SolverError("time step solve failed", err)
        return x

    def _check_control(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.ndim == 1 and self.n == 1:
            u = u[None, :]
        if u.shape != (self.n, self.m):
            raise ValueError(f"control must have shape {(self.n, self.m)}, got {u.shape}")
        return u

    def _state_norm2(self, y: np.ndarray) -> float:
        """``int_Q y^2`` for a trajectory that is piecewise linear in time."""
        My = (self.M @ y.T).T
        quad = np.einsum("ki,ki->k", y, My)
        cross = np.einsum("ki,ki->k", y[:-1], My[1:])
        return self.w_diag @ quad + 2.0 * self.w_off @ cross

    def _tracking(self, y: np.ndarray) -> float:
        """``1/2 int_Q (y - y_d)^2`` for a state given at the time nodes."""
        return (
            0.5 * self._state_norm2(y)
            - float(np.einsum("ki,ki->", y, self.yd_moments))
            + 0.5 * self.yd_norm2
        )

    def _tracking_residual(self, y: np.ndarray) -> np.ndarray:
        """Derivative of the tracking term with respect to each ``y_k``."""
        My = (self.M @ y.T).T
        r = self.w_diag[:, None] * My
        r[:-1] += self.w_off[:, None] * My[1:]
        r[1:] += self.w_off[:, None] * My[:-1]
        return r - self.yd_moments

    def _tikhonov(self, u: np.ndarray) -> float:
        return 0.5 * self.alpha * self.grid.dt * np.sum((u - 0.5) ** 2)


def solve_state(instance: Instance, u) -> np.ndarray:
    """State at the time nodes, shape ``(m + 1, n_interior)``.

    Each step solves ``(M/dt + theta K) y_i = (M/dt - (1 - theta) K) y_{i-1}
    + sum_j u_{j,i} b_j``.
    """
    u = instance._check_control(u)
    src = u.T @ instance.loads  # (m, N)
    y = np.empty((instance.m + 1, instance.mesh.n_interior))
    y[0] = instance.y0
    for i in range(instance.m):
        y[i + 1] = instance._solve(instance._rhs @ y[i] + src[i])
    return y


def objective(instance: Instance, u) -> float:
    u = instance._check_control(u)
    y = solve_state(instance, u)
    return instance._tracking(y) + instance._tikhonov(u)


def reduced_gradient(instance: Instance, u) -> np.ndarray:
    """Exact gradient of the discrete objective via the discrete adjoint."""
    u = instance._check_control(u)
    r = instance._tracking_residual(solve_state(instance, u))
    m = instance.m
    p = np.zeros_like(r)
    # lhs is symmetric, so the transposed solve reuses the factorization
    p[m] = instance._solve(r[m])
    for k in range(m - 1, 0, -1):
        p[k] = instance._solve(r[k] + instance._rhs.T @ p[k + 1])
    grad = instance.loads @ p[1:].T
    return grad + instance.alpha * instance.grid.dt * (u - 0.5)


@dataclass(frozen=True)
class ReducedQuadratic:
    """``f(u) = 1/2 u^T H u + g^T u + c`` with ``u`` flattened row-major (switch, interval)."""

    H: np.ndarray
    g: np.ndarray
    c: float
    shape: tuple[int, int] = field(default=(1, 1))

    def value(self, u) -> float:
        x = np.asarray(u, dtype=float).ravel()
        return float(0.5 * x @ self.H @ x + self.g @ x + self.c)

    def gradient(self, u) -> np.ndarray:
        x = np.asarray(u, dtype=float).ravel()
        return self.H @ x + self.g


def _unit_responses(instance: Instance) -> np.ndarray:
    """State responses to unit controls, shape ``(m + 1, N, n * m)``.

    Column ``j * m + i`` is the trajectory for ``u = e_{j,i}`` with zero initial
    state. The scheme is time invariant, so these are shifted copies of one
    impulse response per switch.
    """
    n, m, N = instance.n, instance.m, instance.mesh.n_interior
    S = np.zeros((m + 1, N, n * m))
    for j in range(n):
        z = np.empty((m, N))
        z[0] = instance._solve(instance.loads[j])
        for k in range(1, m):
            z[k] = instance._solve(instance._rhs @ z[k - 1])
        for i in range(m):
            S[i + 1 :, :, j * m + i] = z[: m - i]
    return S


def assemble_reduced_quadratic(instance: Instance) -> ReducedQuadratic:
    n, m = instance.n, instance.m
    nv = n * m
    if nv > MAX_DENSE_VARIABLES:
        raise SizeGuardError(
            f"n*m = {nv} exceeds the dense Hessian limit {MAX_DENSE_VARIABLES}"
        )
    S = _unit_responses(instance)
    y_free = solve_state(instance, np.zeros((n, m)))
    r0 = instance._tracking_residual(y_free)

    H = np.zeros((nv, nv))
    MS = [instance.M @ S[k] for k in range(m + 1)]
    for k in range(m + 1):
        H += instance.w_diag[k] * (S[k].T @ MS[k])
    for k in range(m):
        cross = S[k].T @ MS[k + 1]
        H += instance.w_off[k] * (cross + cross.T)
    g = np.einsum("kia,ki->a", S, r0)
    c = instance._tracking(y_free)

    a = instance.alpha * instance.grid.dt
    H += a * np.eye(nv)
    g -= 0.5 * a
    c += a * nv / 8.0
    H = 0.5 * (H + H.T)
    return ReducedQuadratic(H=H, g=g, c=float(c), shape=(n, m))


def prolong(u, factor: int) -> np.ndarray:
    """Replicate a piecewise-constant control onto a grid ``factor`` times finer."""
    return np.repeat(np.atleast_2d(np.asarray(u, dtype=float)), factor, axis=1)


def evaluate_fine(
    instance: Instance,
    u,
    n_x_fine: int = 100,
    m_fine: int = 200,
    fine: Optional[Instance] = None,
) -> float:
    """Objective of ``u`` re-evaluated on a finer discretization.

    Pass a prebuilt ``fine`` instance to avoid re-assembling it on every call.
    """
    u = instance._check_control(u)
    if m_fine % instance.m:
        raise ValueError(f"m={instance.m} does not divide m_fine={m_fine}")
    if fine is None:
        if n_x_fine == instance.n_x and m_fine == instance.m:
            fine = instance
        else:
            fine = Instance(instance.problem, n_x_fine, m_fine)
    elif fine.m != m_fine or fine.n_x != n_x_fine:
        raise ValueError("prebuilt fine instance does not match the requested sizes")
    return objective(fine, prolong(u, m_fine // instance.m))
