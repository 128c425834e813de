"""Feasibility, linear minimization and separation for projected switching polytopes.

A binary pattern ``v`` has shape ``(n, m)``: column ``i`` is the state vector
of all switches on time interval ``i``. Two constraint families are supported:

* :class:`BoundedSwitchings` -- every column lies in an allowed set ``U`` and
  the total number of switchings over all switches is at most ``sigma_max``.
  With ``leading_zero`` the control is fixed to zero before ``t = 0``, so a
  switch that is on in the first interval already counts as one switching.
* :class:`DwellTime` -- a single switch whose consecutive switching times are
  at least ``s`` apart.

For a single switch with ``U = {0, 1}`` and a fixed zero start, the convex
hull of the feasible patterns is described by the box and the alternating
inequalities ``sum_k (-1)^(k+1) v[i_k] <= floor(sigma_max / 2)`` over
increasing index sequences of length ``q > sigma_max`` with ``q - sigma_max``
odd.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fem_heat import TimeGrid

EPS_SEP = 1e-8
TIME_TOL = 1e-12
LMO_GUARD = 10**8
DEFAULT_CAP = 10**6


class CapExceededError(ValueError):
    pass


@dataclass(frozen=True)
class BoundedSwitchings:
    sigma_max: int
    n: int = 1
    U: Optional[tuple] = None
    leading_zero: bool = True

    def __post_init__(self):
        if self.sigma_max < 0:
            raise ValueError("sigma_max must be >= 0")
        if self.U is None:
            U = tuple(itertools.product((0, 1), repeat=self.n))
        else:
            U = tuple(tuple(int(b) for b in w) for w in self.U)
        if not U:
            raise ValueError("U must be nonempty")
        if any(len(w) != self.n or any(b not in (0, 1) for b in w) for w in U):
            raise ValueError(f"every element of U must be a 0/1 vector of length {self.n}")
        object.__setattr__(self, "U", tuple(sorted(set(U))))

    @property
    def full_U(self) -> bool:
        return len(self.U) == 2**self.n


@dataclass(frozen=True)
class DwellTime:
    s: float
    grid: TimeGrid
    n: int = field(default=1, init=False)

    def __post_init__(self):
        if not 0 < self.s <= self.grid.T + TIME_TOL:
            raise ValueError(f"dwell time must lie in (0, T], got {self.s}")

    @property
    def sigma(self) -> int:
        """Upper bound ``ceil(T / s)`` on the number of switchings."""
        return math.ceil(self.grid.T / self.s - TIME_TOL)


@dataclass(frozen=True)
class AlternatingCut:
    """``sum_k first_sign * (-1)^(k+1) v[switch, indices[k]] <= rhs`` (indices 0-based)."""

    switch: int
    indices: tuple
    rhs: int
    first_sign: int = 1

    @property
    def signs(self) -> np.ndarray:
        alt = np.where(np.arange(len(self.indices)) % 2 == 0, 1.0, -1.0)
        return self.first_sign * alt

    def lhs(self, v) -> float:
        v = np.atleast_2d(np.asarray(v, dtype=float))
        return float(self.signs @ v[self.switch, list(self.indices)])

    def violation(self, v) -> float:
        return self.lhs(v) - self.rhs

    def row(self, n: int, m: int) -> np.ndarray:
        """Dense coefficient vector over the row-major flattened ``(n, m)`` variables."""
        a = np.zeros(n * m)
        a[self.switch * m + np.asarray(self.indices)] = self.signs
        return a


def _as_pattern(v, n: int) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim == 1:
        v = v[None, :]
    if v.shape[0] != n:
        raise ValueError(f"pattern must have {n} rows, got shape {v.shape}")
    return v


def switch_count(v, leading_zero: bool = True) -> int:
    """Total number of switchings of a binary pattern."""
    v = np.atleast_2d(np.asarray(v, dtype=int))
    count = int(np.abs(np.diff(v, axis=1)).sum())
    if leading_zero:
        count += int(v[:, 0].sum())
    return count


def feasible(constraint, v) -> bool:
    if isinstance(constraint, DwellTime):
        v = _as_pattern(v, 1)
        if v.shape[1] != constraint.grid.m:
            raise ValueError(f"pattern length {v.shape[1]} != m = {constraint.grid.m}")
        row = v[0]
        if not np.all((row == 0) | (row == 1)):
            return False
        # inner runs must last at least s; the first and last runs are exempt
        change = np.flatnonzero(np.diff(row)) + 1
        bounds = np.concatenate([[0], change, [row.size]])
        runs = np.diff(bounds) * constraint.grid.dt
        return bool(np.all(runs[1:-1] >= constraint.s - 1e-9))

    v = _as_pattern(v, constraint.n)
    if not np.all((v == 0) | (v == 1)):
        return False
    allowed = set(constraint.U)
    if any(tuple(int(b) for b in col) not in allowed for col in v.T):
        return False
    return switch_count(v, constraint.leading_zero) <= constraint.sigma_max


def _hamming(U: np.ndarray) -> np.ndarray:
    return np.abs(U[:, None, :] - U[None, :, :]).sum(axis=2)


def lmo_bounded(c, constraint: BoundedSwitchings, prefix=None, tol: float = 1e-12):
    """Exact minimizer of ``sum(c * v)`` over feasible binary patterns.

    Dynamic programming over (interval, current column, switchings used).
    Ties are broken towards fewer switchings, then the lexicographically
    smallest pattern in time order.

    Parameters
    ----------
    c : array_like, shape (n, m)
    constraint : BoundedSwitchings
    prefix : array_like, shape (n, k), optional
        Columns pinned for the first ``k`` intervals.

    Returns
    -------
    v : ndarray of int, shape (n, m)
    value : float
        ``inf`` with ``v = None`` if no feasible pattern matches the prefix.
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    n, m = c.shape
    if n != constraint.n:
        raise ValueError(f"cost has {n} rows, constraint has n = {constraint.n}")
    U = np.array(constraint.U, dtype=int)
    nu = U.shape[0]
    smax = constraint.sigma_max
    if nu * nu * (smax + 1) * m > LMO_GUARD:
        raise CapExceededError("LMO state space exceeds the resource guard")

    k_fixed = 0
    pinned = None
    if prefix is not None:
        prefix = np.atleast_2d(np.asarray(prefix, dtype=int))
        k_fixed = prefix.shape[1]
        pinned = []
        for col in prefix.T:
            hit = np.flatnonzero((U == col).all(axis=1))
            if hit.size == 0:
                return None, math.inf
            pinned.append(int(hit[0]))

    stage = U @ c  # (nu, m): cost of column w on interval i
    dist = _hamming(U)
    start = U.sum(axis=1) if constraint.leading_zero else np.zeros(nu, dtype=int)

    # V[i][w, s]: best (cost, extra switchings) over intervals i+1..m-1 given
    # column w on interval i and s switchings used so far
    inf = math.inf
    Vc = np.full((m, nu, smax + 1), inf)
    Vs = np.zeros((m, nu, smax + 1), dtype=int)
    Vc[m - 1] = 0.0
    s_idx = np.arange(smax + 1)[None, :]
    for i in range(m - 2, -1, -1):
        allowed = [pinned[i + 1]] if i + 1 < k_fixed else range(nu)
        best_c = np.full((nu, smax + 1), inf)
        best_s = np.zeros((nu, smax + 1), dtype=int)
        for x in allowed:
            d = dist[:, x][:, None]
            s2 = s_idx + d
            ok = s2 <= smax
            s2 = np.minimum(s2, smax)
            cand_c = np.where(ok, stage[x, i + 1] + Vc[i + 1, x][s2], inf)
            cand_s = d + Vs[i + 1, x][s2]
            with np.errstate(invalid="ignore"):
                tie = np.abs(cand_c - best_c) <= tol
            better = (cand_c < best_c - tol) | (tie & (cand_s < best_s))
            best_c = np.where(better, cand_c, best_c)
            best_s = np.where(better, cand_s, best_s)
        Vc[i] = best_c
        Vs[i] = best_s

    def total(i, x, s_used):
        if s_used > smax or Vc[i, x, s_used] == inf:
            return inf, 0
        return stage[x, i] + Vc[i, x, s_used], Vs[i, x, s_used]

    # forward reconstruction, choosing the lexicographically smallest
    # column among the optimal continuations (U is sorted)
    choices = [pinned[0]] if k_fixed > 0 else range(nu)
    opts = [(total(0, x, int(start[x])), x) for x in choices]
    best = min(o[0][0] for o in opts)
    if best == inf:
        return None, inf
    best_sw = min(o[0][1] + start[o[1]] for o in opts if o[0][0] <= best + tol)
    x = next(
        o[1] for o in opts if o[0][0] <= best + tol and o[0][1] + start[o[1]] == best_sw
    )
    cols = [x]
    s_used = int(start[x])
    for i in range(1, m):
        target_c, target_s = Vc[i - 1, x, s_used], Vs[i - 1, x, s_used]
        choices = [pinned[i]] if i < k_fixed else range(nu)
        for y in choices:
            tc, ts = total(i, y, s_used + dist[x, y])
            if abs(tc - target_c) <= tol * (1 + abs(target_c)) and ts + dist[x, y] == target_s:
                break
        else:  # pragma: no cover - DP tables are consistent by construction
            raise RuntimeError("LMO reconstruction failed")
        s_used += int(dist[x, y])
        x = y
        cols.append(x)
    v = U[cols].T.copy()
    return v, float(np.sum(c * v))


def nearest_feasible(u_bar, constraint: BoundedSwitchings) -> np.ndarray:
    """Feasible binary pattern closest to ``u_bar`` in the Euclidean norm.

    For binary ``v``, ``||v - u||^2 = sum((1 - 2u) * v) + const``, so this is a
    single LMO call.
    """
    u_bar = np.atleast_2d(np.asarray(u_bar, dtype=float))
    v, _ = lmo_bounded(1.0 - 2.0 * u_bar, constraint)
    return v


def enumerate_patterns(constraint, cap: int = DEFAULT_CAP, m: Optional[int] = None):
    """All feasible binary patterns in lexicographic (time-major) order.

    ``m`` is required for :class:`BoundedSwitchings`; dwell constraints take it
    from their grid.
    """
    if isinstance(constraint, DwellTime):
        m = constraint.grid.m
        if 2**m > 64 * cap:
            raise CapExceededError(f"2^{m} candidate patterns is too many to scan")
        out = []
        for bits in itertools.product((0, 1), repeat=m):
            v = np.array([bits], dtype=int)
            if feasible(constraint, v):
                out.append(v)
                if len(out) > cap:
                    raise CapExceededError(f"more than {cap} feasible patterns")
        return out

    if m is None:
        raise ValueError("m is required for bounded-switching constraints")
    U = [np.array(w, dtype=int) for w in constraint.U]
    smax = constraint.sigma_max
    out = []
    cols = []

    def rec(prev, used):
        if len(cols) == m:
            out.append(np.array(cols, dtype=int).T.reshape(constraint.n, m))
            if len(out) > cap:
                raise CapExceededError(f"more than {cap} feasible patterns")
            return
        for w in U:
            if prev is None:
                d = int(w.sum()) if constraint.leading_zero else 0
            else:
                d = int(np.abs(w - prev).sum())
            if used + d <= smax:
                cols.append(w)
                rec(w, used + d)
                cols.pop()

    rec(None, 0)
    return out


def _best_alternating(row: np.ndarray, start: int, sigma: int):
    """Most violated alternating sequence for one switch.

    Exact DP over positions with states "current sequence length", where
    lengths beyond ``sigma + 1`` are tracked only by parity. Among equal
    values the earliest indices win.
    """
    L = sigma + 1
    n_states = L + 2
    best = np.full(n_states, -math.inf)
    best[0] = 0.0
    back: list[Optional[tuple]] = [None] * n_states

    def nxt(k):
        if k < L:
            return k + 1
        return L + 1 if k == L else L

    def sign(k):
        length = k if k <= L else sigma + 2
        return 1.0 if length % 2 == 0 else -1.0

    for i in range(start, row.size):
        old = best.copy()
        old_back = list(back)
        for k in range(n_states):
            if old[k] == -math.inf:
                continue
            k2 = nxt(k)
            val = old[k] + sign(k) * row[i]
            if val > best[k2] + 1e-15:
                best[k2] = val
                back[k2] = (i, old_back[k])
    if best[L] == -math.inf:
        return None, -math.inf
    seq = []
    node = back[L]
    while node is not None:
        seq.append(node[0])
        node = node[1]
    return tuple(reversed(seq)), best[L] - sigma // 2


def separate_alternating(v_bar, constraint: BoundedSwitchings, eps: float = EPS_SEP):
    """Most violated alternating inequality at ``v_bar``, or ``None``.

    With ``leading_zero`` the inequalities start with a plus sign and have
    right-hand side ``floor(sigma_max / 2)``. With a free initial state the
    valid family consists of the leading-zero inequalities for budgets
    ``sigma_max + 1`` and ``sigma_max + 2``, applied both to ``v`` and to its
    complement ``1 - v`` (which yields the sequences that start with a minus).
    """
    v_bar = np.atleast_2d(np.asarray(v_bar, dtype=float))
    sigma = constraint.sigma_max
    best_cut, best_viol = None, eps
    for j in range(v_bar.shape[0]):
        if constraint.leading_zero:
            variants = [(v_bar[j], 1, sigma)]
        else:
            variants = [
                (row, sgn, budget)
                for row, sgn in ((v_bar[j], 1), (1.0 - v_bar[j], -1))
                for budget in (sigma + 1, sigma + 2)
            ]
        for row, sgn, budget in variants:
            seq, viol = _best_alternating(row, 0, budget)
            if seq is None or not viol > best_viol:
                continue
            rhs = budget // 2
            if sgn < 0:
                # sum s_k (1 - v_k) <= rhs  <=>  -sum s_k v_k <= rhs - sum s_k
                rhs -= len(seq) % 2
            best_cut = AlternatingCut(switch=j, indices=seq, rhs=rhs, first_sign=sgn)
            best_viol = viol
    return best_cut


def candidate_points(s: float, grid: TimeGrid) -> np.ndarray:
    """Candidate switching times: grid points and ``{0, T}`` shifted by multiples of ``s``."""
    if not 0 < s <= grid.T + TIME_TOL:
        raise ValueError(f"dwell time must lie in (0, T], got {s}")
    T = grid.T
    base = grid.nodes
    kmax = int(math.floor(T / s + TIME_TOL))
    shifts = s * np.arange(-kmax, kmax + 1)
    pts = (base[:, None] + shifts[None, :]).ravel()
    pts = pts[(pts >= -TIME_TOL) & (pts <= T + TIME_TOL)]
    pts = np.clip(np.sort(pts), 0.0, T)
    keep = np.concatenate([[True], np.diff(pts) > TIME_TOL])
    out = pts[keep]
    out[0], out[-1] = 0.0, T
    return out


def projection_of_block(a: float, b: float, grid: TimeGrid) -> np.ndarray:
    """Interval averages of the indicator of ``[a, b]``."""
    t = grid.nodes
    overlap = np.clip(np.minimum(t[1:], b) - np.maximum(t[:-1], a), 0.0, None)
    return overlap / grid.dt


@dataclass
class DwellSolution:
    value: float
    projection: np.ndarray
    switch_times: list
    initial_state: int


def lmo_dwell(c, s: float, grid: TimeGrid) -> DwellSolution:
    """Minimize ``c . Pi(u)`` over controls with minimum dwell time ``s``.

    DP over candidate times ``tau_j`` and the state ``b`` right after
    ``tau_j``: either the state persists from ``tau_{j-1}``, or the control
    switches into ``b`` at ``tau_j`` after holding ``1 - b`` on
    ``[tau_j - s, tau_j]`` (or on ``[0, tau_j]`` when ``tau_j < s``).
    """
    c = np.asarray(c, dtype=float).ravel()
    if c.size != grid.m:
        raise ValueError(f"cost length {c.size} != m = {grid.m}")
    tau = candidate_points(s, grid)
    r = tau.size
    # cumulative cost of the all-on control up to each candidate point
    cum = np.array([c @ projection_of_block(0.0, x, grid) for x in tau])

    def block(i0, i1):
        return cum[i1] - cum[i0]

    def index_of(x):
        k = int(np.searchsorted(tau, x - 1e-9))
        if k < r and abs(tau[k] - x) <= 1e-9:
            return k
        return None

    best = np.full((r, 2), math.inf)
    prev = [[None, None] for _ in range(r)]
    best[0] = 0.0
    for j in range(1, r):
        for b in (0, 1):
            cand = [(best[j - 1, b] + b * block(j - 1, j), ("stay", j - 1))]
            if tau[j] >= s - TIME_TOL:
                k = index_of(tau[j] - s)
                if k is not None:
                    cand.append(
                        (best[k, 1 - b] + (1 - b) * block(k, j), ("switch", k))
                    )
            else:
                cand.append(((1 - b) * block(0, j), ("first", 0)))
            val, how = min(cand, key=lambda z: z[0])
            best[j, b] = val
            prev[j][b] = how
    b_end = int(np.argmin(best[r - 1]))
    value = float(best[r - 1, b_end])

    # walk back collecting constant pieces
    pieces = []
    j, b = r - 1, b_end
    while j > 0:
        kind, k = prev[j][b]
        if kind == "stay":
            pieces.append((tau[k], tau[j], b))
            j = k
        elif kind == "switch":
            pieces.append((tau[k], tau[j], 1 - b))
            j, b = k, 1 - b
        else:
            pieces.append((0.0, tau[j], 1 - b))
            j = 0
    pieces.reverse()
    proj = np.zeros(grid.m)
    for a, e, val in pieces:
        if val:
            proj += projection_of_block(a, e, grid)
    states = [p[2] for p in pieces]
    times = [
        pieces[i][0] for i in range(1, len(pieces)) if states[i] != states[i - 1]
    ]
    times = [x for x in times if TIME_TOL < x < grid.T - TIME_TOL]
    return DwellSolution(value, proj, times, int(states[0]) if states else 0)


def dwell_profile_projection(b0: int, times: Sequence[float], grid: TimeGrid) -> np.ndarray:
    """Projection of the control starting in state ``b0`` and toggling at ``times``."""
    pts = [0.0, *sorted(times), grid.T]
    proj = np.zeros(grid.m)
    state = b0
    for a, e in zip(pts[:-1], pts[1:]):
        if state:
            proj += projection_of_block(a, e, grid)
        state = 1 - state
    return proj


def lmo(c, constraint, prefix=None):
    """Dispatch to the LMO of ``constraint``; returns ``(vertex, value)``."""
    if isinstance(constraint, DwellTime):
        if prefix is not None:
            raise NotImplementedError("prefix pinning is only available for bounded switchings")
        sol = lmo_dwell(np.ravel(c), constraint.s, constraint.grid)
        return sol.projection[None, :], sol.value
    return lmo_bounded(c, constraint, prefix=prefix)
