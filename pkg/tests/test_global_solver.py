import numpy as np
import pytest

from switchcut.fem_heat import Instance, Problem, assemble_reduced_quadratic
from switchcut.global_solver import (
    NodeLimitError,
    pattern_values,
    solve_exact,
    solve_exact_bnb,
    solve_exact_enum,
)
from switchcut.relax import frank_wolfe_bound
from switchcut.switch_poly import BoundedSwitchings, CapExceededError, enumerate_patterns

from conftest import random_problem


def zero(*args):
    return 0.0 * args[-1]


def test_zero_data_tie_break():
    inst = Instance(Problem(psi=(zero,), y_d=zero), 5, 6, BoundedSwitchings(2))
    res = solve_exact_enum(inst)
    assert res.value == 0.0 and res.pattern.sum() == 0


def test_enum_against_independent_evaluation():
    rng = np.random.default_rng(0)
    inst = Instance(random_problem(rng), 6, 4, BoundedSwitchings(2))
    from switchcut.fem_heat import objective

    pats = enumerate_patterns(inst.constraint, m=4)
    assert len(pats) == 11
    direct = [objective(inst, p) for p in pats]
    res = solve_exact_enum(inst)
    assert res.value == pytest.approx(min(direct), rel=1e-10)
    assert res.nodes == 11


def test_pattern_values_chunks():
    rng = np.random.default_rng(1)
    inst = Instance(random_problem(rng), 5, 9, BoundedSwitchings(3))
    rq = assemble_reduced_quadratic(inst)
    pats = enumerate_patterns(inst.constraint, m=9)
    np.testing.assert_allclose(pattern_values(rq, pats), [rq.value(p) for p in pats], rtol=1e-13)


def test_enum_cap_and_fallback():
    rng = np.random.default_rng(2)
    inst = Instance(random_problem(rng), 5, 8, BoundedSwitchings(2))
    rq = assemble_reduced_quadratic(inst)
    with pytest.raises(CapExceededError):
        solve_exact_enum(inst, rq, cap=5)
    res = solve_exact(inst, rq, cap=5)
    assert res.method == "bnb"
    assert res.value == pytest.approx(solve_exact_enum(inst, rq).value, abs=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_bnb_matches_enum(seed):
    rng = np.random.default_rng(50 + seed)
    n = 1 + seed % 2
    m = int(rng.integers(3, 9))
    U = [(0, 0), (0, 1), (1, 0)] if seed == 5 else None
    c = BoundedSwitchings(int(rng.integers(0, 4)), n=n, U=U, leading_zero=bool(seed % 3))
    inst = Instance(random_problem(rng, n=n), 6, m, c)
    rq = assemble_reduced_quadratic(inst)
    e, b = solve_exact_enum(inst, rq), solve_exact_bnb(inst, rq)
    assert abs(e.value - b.value) <= 1e-9
    assert rq.value(b.pattern) == pytest.approx(b.value, abs=1e-12)


def test_bnb_zero_budget():
    rng = np.random.default_rng(3)
    inst = Instance(random_problem(rng), 5, 7, BoundedSwitchings(0))
    res = solve_exact_bnb(inst)
    assert res.pattern.sum() == 0 and res.nodes == 1
    assert res.value == pytest.approx(assemble_reduced_quadratic(inst).c)


def test_bnb_single_node_when_root_is_tight():
    # objective minimized at a vertex: the root bound meets the incumbent
    inst = Instance(Problem(psi=(zero,), y_d=zero), 5, 6, BoundedSwitchings(2))
    res = solve_exact_bnb(inst)
    assert res.nodes == 1 and res.value == 0.0


def test_bnb_node_cap():
    inst = Instance(random_problem(np.random.default_rng(4)), 5, 10, BoundedSwitchings(3))
    with pytest.raises(NodeLimitError) as info:
        solve_exact_bnb(inst, node_cap=2, fw_iter=2)
    assert info.value.pattern is not None


def test_benchmark_instance_bnb(benchmark_10_20):
    inst, rq = benchmark_10_20
    e = solve_exact_enum(inst, rq)
    b = solve_exact_bnb(inst, rq)
    assert abs(e.value - b.value) <= 1e-9
    assert b.nodes < 2 * (1 + 20 * 21 // 2)


def test_bounds_below_exact():
    inst = Instance(random_problem(np.random.default_rng(5)), 6, 8, BoundedSwitchings(2))
    rq = assemble_reduced_quadratic(inst)
    assert frank_wolfe_bound(inst, rq=rq).lower_bound <= solve_exact_enum(inst, rq).value + 1e-6
