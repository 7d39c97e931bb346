import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tranx.errors import ContractError, NumericError
from tranx.transport import (TransportConfig, entropic_objective, row_normalize,
                             sinkhorn, sinkhorn_backward)

GRID = np.arange(0, 5_000_001) * 1e-7  # a in [0, 0.5] at 1e-7 resolution


def grid_oracle(C, eps):
    """Every 2x2 coupling with uniform marginals is [[a, .5-a], [.5-a, a]]."""
    a = GRID
    b = 0.5 - a
    with np.errstate(divide="ignore", invalid="ignore"):
        xlx = lambda x: np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)
        obj = a * (C[0, 0] + C[1, 1]) + b * (C[0, 1] + C[1, 0]) + eps * (2 * xlx(a) + 2 * xlx(b))
    a_star = a[np.argmin(obj)]
    return np.array([[a_star, 0.5 - a_star], [0.5 - a_star, a_star]])


def marginal_violation(g):
    M, N = g.shape
    return max(np.abs(g.sum(1) - 1 / M).max(), np.abs(g.sum(0) - 1 / N).max())


def test_one_by_one():
    plan = sinkhorn(np.array([[-0.3]]))
    assert plan.gamma.tolist() == [[1.0]]
    assert bool(plan.converged) and int(plan.iters_used) == 1


@pytest.mark.parametrize("eps", [0.01, 0.1, 1.0, 10.0])
def test_constant_cost_gives_independent_coupling(eps):
    plan = sinkhorn(np.full((2, 2), -0.4), TransportConfig(epsilon=eps))
    assert np.allclose(plan.gamma, 0.25, atol=1e-12, rtol=0)


def test_two_by_two_grid_oracle_example():
    C = np.array([[0.0, -1.0], [-1.0, 0.0]])
    plan = sinkhorn(C, TransportConfig(epsilon=0.1, tol=1e-9))
    g = plan.gamma
    assert g[0, 0] < 0.25
    assert np.allclose(g, [[g[0, 0], 0.5 - g[0, 0]], [0.5 - g[0, 0], g[0, 0]]], atol=1e-9)
    assert np.abs(g - grid_oracle(C, 0.1)).max() <= 1e-6


def test_log_domain_agrees_with_direct():
    rng = np.random.default_rng(4)
    C = -rng.uniform(size=(5, 7))
    for eps in (0.05, 0.1, 1.0):
        a = sinkhorn(C, TransportConfig(epsilon=eps, tol=1e-12)).gamma
        b = sinkhorn(C, TransportConfig(epsilon=eps, tol=1e-12, log_domain=True)).gamma
        assert np.abs(a - b).max() <= 1e-8


def test_overflow_is_reported_and_log_domain_survives():
    C = np.array([[-1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NumericError, match="log_domain"):
        sinkhorn(C, TransportConfig(epsilon=1e-3))
    plan = sinkhorn(C, TransportConfig(epsilon=1e-3, log_domain=True))
    assert plan.all_converged and marginal_violation(plan.gamma) <= 1e-6


def test_bad_inputs():
    with pytest.raises(ContractError):
        TransportConfig(epsilon=0)
    with pytest.raises(ContractError):
        TransportConfig(tol=-1)
    with pytest.raises(ContractError):
        sinkhorn(np.array([[np.nan, 0.0]]))


def test_row_normalize_examples():
    assert np.all(row_normalize(sinkhorn(np.zeros((2, 2)))) == 0.5)
    g = row_normalize(sinkhorn(-np.random.default_rng(0).uniform(size=(1, 5))))
    assert abs(g.sum() - 1) <= 1e-12
    C = -np.random.default_rng(1).uniform(size=(6, 9))
    assert np.abs(row_normalize(sinkhorn(C)).sum(1) - 1).max() <= 6 * 1e-6
    tight = row_normalize(sinkhorn(C, TransportConfig(tol=1e-9)))
    assert np.abs(tight.sum(1) - 1).max() <= 1e-6


def test_newton_polish_reaches_the_scaling_fixed_point():
    """A hard case: plain scaling needs thousands of sweeps, the polish a few."""
    C = -np.random.default_rng(0).uniform(size=(50, 4, 4))
    cfg = TransportConfig(epsilon=0.05, tol=1e-6)
    plain = sinkhorn(C, TransportConfig(epsilon=0.05, tol=1e-11, max_iters=200_000,
                                        newton_after=200_000))
    fast = sinkhorn(C, cfg)
    assert int(plain.iters_used.max()) > 1000
    assert fast.all_converged and int(fast.iters_used.max()) <= 1000
    assert np.abs(fast.gamma - plain.gamma).max() <= 1e-5
    # columns are exact after every step, rows within tol
    assert np.abs(fast.gamma.sum(1) - 0.25).max() <= 1e-12
    assert np.abs(fast.gamma.sum(2) - 0.25).max() <= 1e-6


def test_batched_equals_individual():
    rng = np.random.default_rng(8)
    C = -rng.uniform(size=(4, 3, 5))
    batch = sinkhorn(C)
    for i in range(4):
        one = sinkhorn(C[i])
        assert np.array_equal(batch.gamma[i], one.gamma)
        assert int(batch.iters_used[i]) == int(one.iters_used)
    hard = -np.random.default_rng(0).uniform(size=(20, 4, 4))
    cfg = TransportConfig(epsilon=0.05)
    batch = sinkhorn(hard, cfg)
    for i in range(20):
        assert np.array_equal(batch.gamma[i], sinkhorn(hard[i], cfg).gamma)


costs = st.integers(1, 8).flatmap(
    lambda m: st.integers(1, 8).flatmap(
        lambda n: arrays(np.float64, (m, n), elements=st.floats(-1, 0))))


@given(costs, st.sampled_from([0.05, 0.1, 0.5, 1.0]))
def test_feasibility_property(C, eps):
    plan = sinkhorn(C, TransportConfig(epsilon=eps))
    assert plan.all_converged
    assert np.all(plan.gamma >= 0)
    assert marginal_violation(plan.gamma) <= 1e-6
    assert abs(plan.gamma.sum() - 1) <= 1e-6


@given(costs)
def test_plan_beats_independent_coupling(C):
    """The solved plan has no larger entropic objective than the product coupling."""
    M, N = C.shape
    eps = 0.1
    plan = sinkhorn(C, TransportConfig(epsilon=eps, tol=1e-10))
    indep = np.full((M, N), 1 / (M * N))
    assert entropic_objective(plan.gamma, C, eps) <= entropic_objective(indep, C, eps) + 1e-9


@given(st.integers(2, 6), st.integers(2, 6), st.data(), st.floats(0.05, 1.0))
def test_isolated_minimum_attracts_row_mass(M, N, data, depth):
    """Constant cost except one strictly lower entry: it is the largest in its row."""
    i = data.draw(st.integers(0, M - 1))
    j = data.draw(st.integers(0, N - 1))
    C = np.full((M, N), -0.2)
    C[i, j] -= depth * 0.8
    for eps in (0.05, 0.1):
        g = sinkhorn(C, TransportConfig(epsilon=eps, tol=1e-10)).gamma
        others = np.delete(g[i], j)
        assert np.all(g[i, j] > others)


@given(costs.filter(lambda c: c.size > 1), st.data())
def test_lowering_a_cost_raises_its_mass(C, data):
    i = data.draw(st.integers(0, C.shape[0] - 1))
    j = data.draw(st.integers(0, C.shape[1] - 1))
    cfg = TransportConfig(epsilon=0.1, tol=1e-12, max_iters=20000)
    before = sinkhorn(C, cfg).gamma[i, j]
    C2 = C.copy()
    C2[i, j] -= 0.05
    after = sinkhorn(C2, cfg).gamma[i, j]
    assert after >= before - 1e-12


def test_global_monotonicity_counterexample():
    """Minimal cost entry need not dominate its row once other rows compete."""
    C = np.array([[-1.0, -0.9], [-0.9, 0.0]])
    g = sinkhorn(C, TransportConfig(epsilon=0.1, tol=1e-12)).gamma
    assert g[0, 0] < 0.25  # row 0 holds 0.5, so its minimal entry gets the smaller share
    assert np.abs(g - grid_oracle(C, 0.1)).max() <= 1e-6


@pytest.mark.parametrize("log_domain", [False, True])
def test_unrolled_backward_matches_finite_differences(log_domain):
    rng = np.random.default_rng(11)
    C = -rng.uniform(size=(3, 4))
    cfg = TransportConfig(epsilon=0.2, tol=1e-8, log_domain=log_domain)
    plan = sinkhorn(C, cfg, record=True)
    k = int(plan.iters_used)
    W = rng.normal(size=(3, 4))
    dC = sinkhorn_backward(C, plan, W)
    h = 1e-6
    for idx in np.ndindex(C.shape):
        e = np.zeros_like(C)
        e[idx] = h
        fp = (sinkhorn(C + e, cfg, fixed_iters=k).gamma * W).sum()
        fm = (sinkhorn(C - e, cfg, fixed_iters=k).gamma * W).sum()
        assert abs((fp - fm) / (2 * h) - dC[idx]) <= 1e-7


def test_feasibility_timing_sweep():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    for n in (4, 16, 64):
        for eps in (0.05, 0.1, 1.0):
            plan = sinkhorn(-rng.uniform(size=(50, n, n)), TransportConfig(epsilon=eps))
            assert plan.all_converged
            assert plan.max_violation.max() <= 1e-6
    assert time.perf_counter() - start < 5.0
