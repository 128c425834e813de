import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from switchcut.fem_heat import TimeGrid
from switchcut.switch_poly import (
    AlternatingCut,
    BoundedSwitchings,
    CapExceededError,
    DwellTime,
    candidate_points,
    dwell_profile_projection,
    enumerate_patterns,
    feasible,
    lmo,
    lmo_bounded,
    lmo_dwell,
    nearest_feasible,
    projection_of_block,
    separate_alternating,
    switch_count,
)


def brute_force_patterns(constraint, m):
    """All binary (n, m) arrays accepted by ``feasible``, in lexicographic order."""
    n = constraint.n
    out = []
    for cols in itertools.product(itertools.product((0, 1), repeat=n), repeat=m):
        v = np.array(cols, dtype=int).T.reshape(n, m)
        if feasible(constraint, v):
            out.append(v)
    return out


def in_hull(point, patterns):
    """LP membership test for the convex hull of ``patterns``."""
    P = np.array([p.ravel() for p in patterns], dtype=float).T
    k = P.shape[1]
    A_eq = np.vstack([P, np.ones((1, k))])
    b_eq = np.append(np.ravel(point), 1.0)
    res = linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return res.status == 0


# ---------------------------------------------------------------------------
# feasibility and enumeration

def test_switch_count_and_feasible():
    assert switch_count([0, 1, 1, 0]) == 2
    assert switch_count([1, 1, 0]) == 2
    assert switch_count([1, 1, 0], leading_zero=False) == 1
    c = BoundedSwitchings(2)
    assert feasible(c, [0, 1, 1, 0])
    assert not feasible(c, [1, 0, 1])
    assert not feasible(c, [0, 0.5, 0])
    c2 = BoundedSwitchings(3, n=2, U=[(0, 0), (0, 1), (1, 0)])
    assert not feasible(c2, [[1, 0], [1, 0]])  # column (1, 1) is not allowed


@pytest.mark.parametrize("m", [1, 3, 4, 7, 10])
def test_enumeration_count(m):
    pats = enumerate_patterns(BoundedSwitchings(2), m=m)
    assert len(pats) == 1 + m * (m + 1) // 2
    assert len({p.tobytes() for p in pats}) == len(pats)


@pytest.mark.parametrize(
    "constraint,m",
    [
        (BoundedSwitchings(1), 5),
        (BoundedSwitchings(3, leading_zero=False), 6),
        (BoundedSwitchings(2, n=2), 4),
        (BoundedSwitchings(3, n=2, U=[(0, 0), (0, 1), (1, 0)]), 4),
    ],
)
def test_enumeration_matches_brute_force(constraint, m):
    got = enumerate_patterns(constraint, m=m)
    want = brute_force_patterns(constraint, m)
    assert [g.tolist() for g in got] == [w.tolist() for w in want]


def test_enumeration_cap():
    with pytest.raises(CapExceededError):
        enumerate_patterns(BoundedSwitchings(2), cap=10, m=10)


def test_u_conflict_example():
    # never both on, at most one switching
    c = BoundedSwitchings(1, n=2, U=[(0, 0), (0, 1), (1, 0)])
    assert len(enumerate_patterns(c, m=2)) == 5
    assert [p.tolist() for p in enumerate_patterns(BoundedSwitchings(0), m=4)] == [[[0, 0, 0, 0]]]


def test_small_enumeration_by_hand():
    got = {"".join(map(str, p[0])) for p in enumerate_patterns(BoundedSwitchings(2), m=3)}
    assert got == {"000", "100", "110", "111", "010", "011", "001"}


def test_dwell_run_lengths():
    c = DwellTime(1.5, TimeGrid(2.0, 4))
    assert feasible(c, [[1, 1, 1, 0]])
    assert not feasible(c, [[1, 0, 1, 1]])


# ---------------------------------------------------------------------------
# linear minimization

def test_lmo_examples():
    v, val = lmo_bounded([[1, -1, 1, -1, 1]], BoundedSwitchings(2))
    assert val == -1 and v.tolist() == [[0, 0, 0, 1, 0]]
    v, val = lmo_bounded(-np.ones((1, 4)), BoundedSwitchings(2))
    assert val == -4 and v.tolist() == [[1, 1, 1, 1]]
    v, val = lmo_bounded(np.zeros((1, 6)), BoundedSwitchings(2))
    assert val == 0 and v.sum() == 0


@pytest.mark.parametrize("seed", range(5))
def test_lmo_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        n = int(rng.integers(1, 3))
        m = int(rng.integers(1, 9))
        U = None if n == 1 or rng.random() < 0.5 else [(0, 0), (1, 0), (1, 1)]
        c = BoundedSwitchings(int(rng.integers(0, 4)), n=n, U=U, leading_zero=bool(rng.random() < 0.7))
        cost = rng.normal(size=(n, m))
        pats = enumerate_patterns(c, m=m)
        vals = [float(np.sum(cost * p)) for p in pats]
        v, val = lmo_bounded(cost, c)
        assert feasible(c, v)
        assert val == pytest.approx(min(vals), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 7).flatmap(
        lambda m: st.tuples(
            st.lists(st.integers(-3, 3), min_size=m, max_size=m),
            st.integers(0, 4),
            st.booleans(),
        )
    )
)
def test_lmo_integer_costs_property(data):
    # integer costs produce many ties; the value must still be exact
    cost, sigma, lz = data
    c = BoundedSwitchings(sigma, leading_zero=lz)
    m = len(cost)
    v, val = lmo_bounded([cost], c)
    best = min(float(np.dot(cost, p[0])) for p in enumerate_patterns(c, m=m))
    assert val == best and feasible(c, v)


def test_prefix_pinning_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(40):
        m = int(rng.integers(2, 10))
        c = BoundedSwitchings(int(rng.integers(0, 4)))
        cost = rng.normal(size=(1, m))
        k = int(rng.integers(1, m + 1))
        prefix = rng.integers(0, 2, size=(1, k))
        pats = [p for p in enumerate_patterns(c, m=m) if np.array_equal(p[:, :k], prefix)]
        v, val = lmo_bounded(cost, c, prefix=prefix)
        if not pats:
            assert v is None and val == np.inf
            continue
        assert np.array_equal(v[:, :k], prefix)
        assert val == pytest.approx(min(float(np.sum(cost * p)) for p in pats), abs=1e-12)


def test_nearest_feasible_examples():
    c = BoundedSwitchings(1)
    assert nearest_feasible([[0, 1, 1, 0]], BoundedSwitchings(2)).tolist() == [[0, 1, 1, 0]]
    assert nearest_feasible(np.full((1, 5), 0.6), c).tolist() == [[1] * 5]
    u = np.array([[0.9, 0.1, 0.9]])
    v = nearest_feasible(u, c)
    d = min(np.sum((p - u) ** 2) for p in enumerate_patterns(c, m=3))
    assert np.sum((v - u) ** 2) == pytest.approx(d)


def test_nearest_feasible():
    c = BoundedSwitchings(2)
    v = nearest_feasible([[0.1, 0.9, 0.2, 0.8, 0.7]], c)
    pats = enumerate_patterns(c, m=5)
    d = [np.sum((p - [[0.1, 0.9, 0.2, 0.8, 0.7]]) ** 2) for p in pats]
    assert np.sum((v - [[0.1, 0.9, 0.2, 0.8, 0.7]]) ** 2) == pytest.approx(min(d))


# ---------------------------------------------------------------------------
# separation

def test_counterexample_cut():
    m = 12
    v = np.zeros((1, m))
    v[0, 4:8] = 0.5
    cut = separate_alternating(v, BoundedSwitchings(1))
    assert cut.indices == (4, 8)
    assert cut.violation(v) == pytest.approx(0.5)


def test_alternating_example():
    v = np.array([[0, 1, 0, 1, 0]], dtype=float)
    cut = separate_alternating(v, BoundedSwitchings(2))
    assert cut.indices == (1, 2, 3)
    assert cut.rhs == 1 and cut.violation(v) == pytest.approx(1.0)
    assert separate_alternating(np.zeros((1, 5)), BoundedSwitchings(2)) is None


def test_cut_row():
    cut = AlternatingCut(switch=1, indices=(0, 2, 3), rhs=1)
    np.testing.assert_array_equal(cut.row(2, 4), [0, 0, 0, 0, 1, 0, -1, 1])


@pytest.mark.parametrize("sigma", [0, 1, 2, 3])
@pytest.mark.parametrize("leading_zero", [True, False])
def test_separation_sound_and_complete(sigma, leading_zero):
    rng = np.random.default_rng(100 + sigma)
    c = BoundedSwitchings(sigma, leading_zero=leading_zero)
    for m in (3, 5, 8):
        pats = enumerate_patterns(c, m=m)
        for _ in range(25):
            # mix hull points with arbitrary box points
            if rng.random() < 0.5:
                w = rng.dirichlet(np.ones(len(pats)))
                x = sum(wi * p for wi, p in zip(w, pats)).astype(float)
            else:
                x = rng.uniform(size=(1, m))
            cut = separate_alternating(x, c)
            if cut is None:
                assert in_hull(x, pats)
            else:
                assert cut.violation(x) > 0
                assert all(cut.lhs(p) <= cut.rhs + 1e-12 for p in pats)
                assert not in_hull(x, pats)


def test_separation_is_most_violated():
    rng = np.random.default_rng(8)
    c = BoundedSwitchings(2)
    m = 7
    for _ in range(30):
        x = rng.uniform(size=m)
        best = 0.0
        for q in range(3, m + 1, 2):
            for idx in itertools.combinations(range(m), q):
                signs = np.where(np.arange(q) % 2 == 0, 1.0, -1.0)
                best = max(best, signs @ x[list(idx)] - 1)
        cut = separate_alternating(x[None, :], c)
        got = 0.0 if cut is None else cut.violation(x[None, :])
        assert got == pytest.approx(best, abs=1e-12) or (cut is None and best <= 1e-8)


# ---------------------------------------------------------------------------
# dwell time

def test_candidate_points():
    S = candidate_points(1.5, TimeGrid(3.0, 3))
    np.testing.assert_allclose(S, [0, 0.5, 1, 1.5, 2, 2.5, 3])


def brute_force_dwell(c, s, grid):
    """Minimum of ``c . Pi(u)`` over toggling times drawn from the candidate set."""
    S = candidate_points(s, grid)
    inner = [t for t in S if 0 < t < grid.T]
    best = (np.inf, None)
    for b0 in (0, 1):
        for r in range(len(inner) + 1):
            for times in itertools.combinations(inner, r):
                if any(b - a < s - 1e-9 for a, b in zip(times[:-1], times[1:])):
                    continue
                proj = dwell_profile_projection(b0, times, grid)
                val = float(c @ proj)
                if val < best[0] - 1e-12:
                    best = (val, proj)
    return best


def test_fractional_vertex():
    grid = TimeGrid(3.0, 3)
    sol = lmo_dwell([1, -1, 0.5], 1.5, grid)
    np.testing.assert_allclose(sol.projection, [0, 1, 0.5], atol=1e-12)
    assert sol.value == pytest.approx(-0.75)
    assert sol.switch_times == pytest.approx([1.0, 2.5])


@pytest.mark.parametrize("T,m,s", [(3.0, 3, 1.5), (2.0, 4, 0.75), (2.0, 5, 0.6), (1.0, 6, 0.35), (3.0, 6, 1.0)])
def test_dwell_matches_brute_force(T, m, s):
    rng = np.random.default_rng(int(10 * s) + m)
    grid = TimeGrid(T, m)
    for _ in range(15):
        c = rng.normal(size=m)
        sol = lmo_dwell(c, s, grid)
        want, _ = brute_force_dwell(c, s, grid)
        assert sol.value == pytest.approx(want, abs=1e-12)
        # the reported projection is consistent with its switching times
        proj = dwell_profile_projection(sol.initial_state, sol.switch_times, grid)
        np.testing.assert_allclose(proj, sol.projection, atol=1e-12)
        assert np.all(np.diff(sol.switch_times) >= s - 1e-9)


def test_dwell_binary_patterns_feasible():
    grid = TimeGrid(2.0, 4)
    c = DwellTime(0.75, grid)
    for p in enumerate_patterns(c):
        assert feasible(c, p)
    assert not feasible(c, [[0, 1, 0, 0]])
    assert feasible(c, [[1, 0, 0, 0]])
    v, _ = lmo(np.array([1.0, -1.0, 1.0, -1.0]), c)
    assert v.shape == (1, 4)


@pytest.mark.parametrize("sigma", [1, 2, 3])
def test_coarse_cuts_valid_after_refinement(sigma):
    c = BoundedSwitchings(sigma)
    m_c, factor = 5, 2
    coarse = enumerate_patterns(c, m=m_c)
    fine = enumerate_patterns(c, m=m_c * factor)
    rng = np.random.default_rng(sigma)
    cuts = []
    for _ in range(200):
        x = rng.uniform(size=(1, m_c))
        cut = separate_alternating(x, c)
        if cut is not None:
            cuts.append(cut)
    assert cuts
    for cut in cuts:
        assert all(cut.lhs(p) <= cut.rhs for p in coarse)
        for p in fine:
            averaged = p.reshape(1, m_c, factor).mean(axis=2)
            assert cut.lhs(averaged) <= cut.rhs + 1e-12


def test_nested_projections():
    # averaging the fine projection pairwise gives the coarse projection
    fine, coarse = TimeGrid(2.0, 8), TimeGrid(2.0, 4)
    for times in ([0.3], [0.3, 1.1], [0.25, 0.9, 1.7]):
        pf = dwell_profile_projection(1, times, fine)
        pc = dwell_profile_projection(1, times, coarse)
        np.testing.assert_allclose(pf.reshape(4, 2).mean(axis=1), pc, atol=1e-14)
    np.testing.assert_allclose(projection_of_block(0.25, 1.0, coarse), [0.5, 1, 0, 0])
