import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xbprune.lgd import (BudgetError, DivergenceError, SolverConfig, alpha_rescale, candidate_order, lgd,
                         lgd_step, optimal_alpha, rpp)

from oracles import best_subset


@settings(max_examples=300, deadline=None)
@given(I=st.integers(1, 12), data=st.data())
def test_rpp_sparsity_and_support(I, data):
    r = data.draw(st.integers(1, I))
    r0 = data.draw(st.integers(0, I))
    seed = data.draw(st.integers(0, 2**31))
    beta = np.random.default_rng(seed).standard_normal(I)
    out = rpp(beta, r, r0, seed)
    support = np.flatnonzero(out)
    assert support.size == r
    top = candidate_order(np.abs(beta))[:min(r + r0, I)]
    assert set(support) <= set(top)
    np.testing.assert_array_equal(out[support], beta[support])


def test_rpp_four_candidates():
    beta = np.array([0.9, 0.5, 0.05, -0.6, 0.01, 0.8])
    seen = set()
    for seed in range(200):
        support = frozenset(np.flatnonzero(rpp(beta, 3, 1, seed)))
        assert support <= {0, 1, 3, 5}
        seen.add(support)
    # relaxation lets every 3-subset of the 4 candidates occur
    assert len(seen) == 4


@pytest.mark.parametrize("seed", range(5))
def test_rpp_r0_zero_is_top_r(seed):
    beta = np.random.default_rng(seed).standard_normal(9)
    out = rpp(beta, 4, 0, seed)
    assert set(np.flatnonzero(out)) == set(np.argsort(-np.abs(beta))[:4])


def test_rpp_full_budget_and_clamp():
    beta = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(rpp(beta, 3, 5, 0), beta)


def test_rpp_ties_prefer_low_index():
    out = rpp(np.ones(6), 2, 0, 0)
    assert np.flatnonzero(out).tolist() == [0, 1]


def test_rpp_all_zero_falls_back():
    out = rpp(np.zeros(6), 2, 1, 0)
    assert np.count_nonzero(out) == 2
    assert set(np.flatnonzero(out)) <= {0, 1, 2}


def test_rpp_budget_error():
    with pytest.raises(BudgetError):
        rpp(np.ones(3), 4, 0, 0)
    with pytest.raises(BudgetError):
        rpp(np.ones(3), 0, 0, 0)


def test_rpp_seeded_determinism():
    beta = np.random.default_rng(0).standard_normal(8)
    assert np.array_equal(rpp(beta, 3, 2, 42), rpp(beta, 3, 2, 42))


# -- gradient step and scaling -------------------------------------------------

def test_lgd_step_stationary_and_zero_eta():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 6))
    Y = rng.standard_normal(20)
    b_ls = np.linalg.lstsq(X, Y, rcond=None)[0]
    np.testing.assert_allclose(lgd_step(b_ls, X, Y, 0.3), b_ls, atol=1e-12)
    b = rng.standard_normal(6)
    assert np.array_equal(lgd_step(b, X, Y, 0.0), b)


def test_lgd_step_arithmetic():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((20, 6))
    Y = rng.standard_normal(20)
    b = rng.standard_normal(6)
    grad = np.array([sum(X[m, i] * (X[m] @ b - Y[m]) for m in range(20)) for i in range(6)])
    np.testing.assert_allclose(lgd_step(b, X, Y, 0.01), b - 0.01 * grad, atol=1e-12)


def test_lgd_step_divergence():
    X = np.full((3, 2), 1e200)
    with pytest.raises(DivergenceError, match="eta"):
        lgd_step(np.ones(2), X, np.ones(3), 1e200)


def test_alpha_cases():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((30, 5))
    b = np.array([1.0, 0, 1, 0, 0])
    Z = X @ b
    np.testing.assert_allclose(alpha_rescale(b, X, 2 * Z), 2 * b)
    Y = rng.standard_normal(30)
    Y_perp = Y - (Y @ Z) / (Z @ Z) * Z
    np.testing.assert_allclose(alpha_rescale(b, X, Y_perp), 0 * b, atol=1e-12)
    np.testing.assert_allclose(optimal_alpha(Z, Y), (Z @ Y) / (Z @ Z), rtol=1e-12)


def test_alpha_degenerate():
    X = np.zeros((4, 3))
    assert optimal_alpha(X @ np.ones(3), np.ones(4)) == 1.0


def test_alpha_all_zero_warns(caplog):
    with caplog.at_level(logging.WARNING):
        out = alpha_rescale(np.zeros(3), np.ones((2, 3)), np.ones(2))
    assert not out.any() and "all-zero" in caplog.text


# -- solver --------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_planted_support_recovered(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, 6))
    truth = np.zeros(6)
    truth[rng.choice(6, 3, replace=False)] = 1
    Y = X @ truth
    res = lgd(X, Y, 3, SolverConfig(seed=seed))
    best_loss, best_mask = best_subset(X, Y, 3)
    assert np.array_equal(best_mask, truth)
    assert np.array_equal(res.beta_L0, truth)
    assert res.loss == pytest.approx(best_loss, abs=1e-9)


def test_full_budget():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((25, 5))
    Y = rng.standard_normal(25)
    res = lgd(X, Y, 5)
    assert res.beta_L0.tolist() == [1.0] * 5
    z = X.sum(axis=1)
    alpha = (z @ Y) / (z @ z)
    assert res.loss == pytest.approx(float(np.sum((Y - alpha * z) ** 2)))


@settings(max_examples=50, deadline=None)
@given(I=st.integers(2, 8), seed=st.integers(0, 10_000), data=st.data())
def test_lgd_exact_r_and_monotone_history(I, seed, data):
    r = data.draw(st.integers(1, I))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((30, I))
    Y = X @ rng.random(I)
    res = lgd(X, Y, r, SolverConfig(iters=20, seed=seed))
    assert set(np.unique(res.beta_L0)) <= {0.0, 1.0}
    assert res.beta_L0.sum() == r
    assert len(res.history) == 20
    assert all(a >= b for a, b in zip(res.history, res.history[1:]))


def test_lgd_deterministic():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((30, 8))
    Y = rng.standard_normal(30)
    a = lgd(X, Y, 3, SolverConfig(seed=9))
    b = lgd(X, Y, 3, SolverConfig(seed=9))
    assert np.array_equal(a.beta_L0, b.beta_L0) and a.loss == b.loss


def test_config_defaults_and_validation():
    cfg = SolverConfig()
    assert (cfg.iters, cfg.r0) == (50, 1)
    for bad in ({"eta": 0.0}, {"iters": 0}, {"r0": -1}):
        with pytest.raises(ValueError):
            SolverConfig(**bad)
    with pytest.raises(BudgetError):
        lgd(np.ones((3, 2)), np.ones(3), 3)
