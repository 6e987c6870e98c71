import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import qp_active_set, random_qp
from utnmpc.solver import (
    AffineBoxProjector, InfeasibleError, NlpProblem, NonFiniteObjectiveError, RankDeficientError, SolveOptions,
    finite_diff_gradient, solve, solve_multistart, write_trace,
)


def quad(H, g):
    def vg(u):
        Hu = H @ u
        return 0.5 * u @ Hu + g @ u, Hu + g
    return vg


def qp_problem(H, g, a, b, lo, hi):
    return NlpProblem(n=len(g), lo=lo, hi=hi, u0=np.zeros(len(g)), value_and_grad=quad(H, g), A=a[None, :],
                      b=[b])


TIGHT = SolveOptions(opt_tol=1e-9, max_iter=5000)


def test_unconstrained_quadratic():
    c = np.array([0.3, -0.2, 0.7])
    p = NlpProblem(n=3, lo=-1, hi=1, u0=np.zeros(3), value_and_grad=lambda u: ((u - c) @ (u - c), 2 * (u - c)))
    rep = solve(p)
    assert rep.converged
    np.testing.assert_allclose(rep.u, c, atol=1e-8)


def test_symmetric_equality_problem():
    p = NlpProblem(n=2, lo=0, hi=2, u0=[2.0, 0.0], objective=lambda u: u @ u, A=[[1.0, 1.0]], b=[2.0])
    rep = solve(p)
    np.testing.assert_allclose(rep.u, [1.0, 1.0], atol=1e-6)


@pytest.mark.parametrize("seed", range(8))
def test_random_qp_matches_active_set_oracle(seed):
    rng = np.random.default_rng(seed)
    qp = random_qp(rng, int(rng.integers(2, 8)))
    f_star, _ = qp_active_set(*qp)
    rep = solve(qp_problem(*qp), TIGHT)
    assert rep.objective - f_star <= 1e-5 * max(1.0, abs(f_star))
    assert rep.max_violation <= 1e-8


def test_finite_diff_of_squared_norm():
    np.testing.assert_allclose(finite_diff_gradient(lambda u: u @ u, [1.0, 2.0]), [2.0, 4.0], atol=1e-6)


def test_finite_diff_of_constant():
    np.testing.assert_array_equal(finite_diff_gradient(lambda u: 3.0, np.ones(4)), np.zeros(4))


def test_finite_diff_reports_non_finite():
    with pytest.raises(NonFiniteObjectiveError):
        finite_diff_gradient(lambda u: 1.0 / (u[0] - 1e-6) if u[0] > 0 else np.inf, [0.0])


def test_missing_gradient_uses_differences():
    c = np.array([0.25, 0.5])
    p = NlpProblem(n=2, lo=0, hi=1, u0=[1.0, 0.0], objective=lambda u: float(np.sum((u - c) ** 4) + u @ u))
    rep = solve(p)
    assert rep.converged and rep.pg_norm <= 1e-5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 8))
def test_iterates_feasible_and_descending(seed, n):
    qp = random_qp(np.random.default_rng(seed), n)
    rep = solve(qp_problem(*qp))
    lo, hi = qp[4], qp[5]
    assert np.all(rep.u >= lo) and np.all(rep.u <= hi)
    objs = [row[1] for row in rep.trace]
    assert all(b <= a for a, b in zip(objs, objs[1:]))
    assert max(row[4] for row in rep.trace) <= 1e-8
    if rep.converged:
        assert rep.max_violation <= 1e-8 and rep.pg_norm <= 1e-5


def test_solve_is_deterministic():
    qp = random_qp(np.random.default_rng(11), 6)
    a, b = solve(qp_problem(*qp)), solve(qp_problem(*qp))
    assert a.objective == b.objective and np.array_equal(a.u, b.u) and a.iterations == b.iterations
    m1 = solve_multistart(qp_problem(*qp), restarts=4, seed=3)
    m2 = solve_multistart(qp_problem(*qp), restarts=4, seed=3)
    assert np.array_equal(m1.u, m2.u)


def test_multistart_never_worse_than_single_start():
    # two separated wells; the default start sits in the shallow one
    f = lambda u: float(np.sum((u**2 - 1.0) ** 2 + 0.3 * u))  # noqa: E731
    p = NlpProblem(n=2, lo=-2, hi=2, u0=[1.0, 1.0], objective=f)
    single = solve(p)
    best = solve_multistart(p, restarts=6)
    assert best.objective <= single.objective
    assert np.all(best.u < 0)


def test_infeasible_cycle_sum():
    p = NlpProblem(n=2, lo=0, hi=1, u0=[0, 0], objective=lambda u: 0.0, A=[[1.0, 1.0]], b=[5.0])
    with pytest.raises(InfeasibleError):
        solve(p)


def test_infeasible_general_equality():
    p = NlpProblem(n=2, lo=0, hi=1, u0=[0, 0], objective=lambda u: 0.0, A=[[1.0, 2.0]], b=[5.0])
    with pytest.raises(InfeasibleError):
        solve(p, SolveOptions())


def test_nan_objective_reports_iterate():
    p = NlpProblem(n=1, lo=0, hi=1, u0=[0.5], value_and_grad=lambda u: (np.nan, np.zeros(1)))
    with pytest.raises(NonFiniteObjectiveError) as info:
        solve(p)
    np.testing.assert_array_equal(info.value.iterate, [0.5])


def test_rank_deficient_equalities_rejected():
    with pytest.raises(RankDeficientError):
        NlpProblem(n=2, lo=0, hi=1, u0=[0, 0], objective=lambda u: 0.0, A=[[1, 1], [2, 2]], b=[1, 2])


def test_inverted_bounds_rejected():
    with pytest.raises(ValueError):
        NlpProblem(n=1, lo=1, hi=0, u0=[0], objective=lambda u: 0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_block_projection_equals_dykstra(seed):
    rng = np.random.default_rng(seed)
    n = 6
    lo, hi = np.full(n, 10.0), np.full(n, 100.0)
    A = np.zeros((2, n))
    A[0, :3] = 1.0
    A[1, 3:5] = 1.0
    b = np.array([rng.uniform(30, 300), rng.uniform(20, 200)])
    y = rng.uniform(-50, 150, n)
    fast = AffineBoxProjector(lo, hi, A, b)
    assert fast.blocks is not None
    slow = AffineBoxProjector(lo, hi, A * 1.0, b)
    slow.blocks = None
    slow._pinv = np.linalg.pinv(A)
    np.testing.assert_allclose(fast(y), slow(y), atol=1e-8)
    assert fast.violation(fast(y)) <= 1e-10


def test_trace_dump(tmp_path):
    rep = solve(qp_problem(*random_qp(np.random.default_rng(2), 3)))
    write_trace(rep, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,objective,pg_norm,step,max_violation"
    assert len(lines) == len(rep.trace) + 1
