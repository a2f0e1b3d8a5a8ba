import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from shockdid.errors import RankDeficientError
from shockdid.numerics import (
    DesignMatrix,
    SeparationWarning,
    chi_square_homogeneity,
    cluster_robust_cov,
    fit_logistic,
    fit_ols,
    gamma_q,
    within_transform,
)


def _with_intercept(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(len(x)), x])


# -- logistic -------------------------------------------------------------------


def test_logistic_intercept_only_closed_form():
    y = np.array([1, 0, 0, 0] * 5)
    res = fit_logistic(np.ones((20, 1)), y)
    assert res.converged
    assert_allclose(res.params[0], math.log(0.25 / 0.75), atol=1e-10)


def test_logistic_mirrored_data_has_zero_slope():
    x = np.array([-2.0, -1.0, 0.5, 1.5, 3.0])
    y = np.array([1, 0, 1, 1, 0])
    X = _with_intercept(np.concatenate([x, x]))
    yy = np.concatenate([y, 1 - y])
    res = fit_logistic(X, yy)
    assert abs(res.params[1]) < 1e-10
    assert abs(res.params[0]) < 1e-10


def _grid_maximiser(X, y):
    def ll(b0, b1):
        eta = b0[..., None] + b1[..., None] * X[:, 1]
        return np.sum(y * eta - np.logaddexp(0, eta), axis=-1)

    center, width = np.array([0.0, 0.0]), 8.0
    for _ in range(30):
        g0 = np.linspace(center[0] - width, center[0] + width, 41)
        g1 = np.linspace(center[1] - width, center[1] + width, 41)
        B0, B1 = np.meshgrid(g0, g1, indexing="ij")
        vals = ll(B0, B1)
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        center = np.array([g0[i], g1[j]])
        width /= 4
    return center


def test_logistic_matches_likelihood_grid_search():
    x = np.array([0.1, 0.9, 1.7, 2.2, 3.1, 4.0])
    y = np.array([0, 1, 0, 1, 1, 1])
    X = _with_intercept(x)
    res = fit_logistic(X, y)
    assert_allclose(res.params, _grid_maximiser(X, y), atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_logistic_score_equation_mean_fitted_equals_mean_y(seed):
    rng = np.random.default_rng(seed)
    n = 60
    X = _with_intercept(rng.normal(size=(n, 2)))
    y = (rng.uniform(size=n) < 0.4).astype(float)
    if y.min() == y.max() or abs(y.mean() - 0.5) > 0.45:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        res = fit_logistic(X, y)
    if res.converged:
        assert abs(res.fitted.mean() - y.mean()) < 1e-8


def test_logistic_handles_large_scale_covariate():
    rng = np.random.default_rng(3)
    income = rng.lognormal(12, 0.4, size=500)
    y = (rng.uniform(size=500) < 1 / (1 + np.exp(-(income - income.mean()) / 1e5))).astype(float)
    res = fit_logistic(_with_intercept(income), y)
    assert res.converged
    assert abs(res.fitted.mean() - y.mean()) < 1e-8


def test_logistic_separation_is_flagged():
    x = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
    y = np.array([0, 0, 0, 1, 1, 1])
    with pytest.warns(SeparationWarning):
        res = fit_logistic(_with_intercept(x), y)
    assert not res.converged
    assert res.params[1] > 0


def test_logistic_single_class_is_an_error():
    with pytest.raises(ValueError, match="single class"):
        fit_logistic(np.ones((4, 1)), np.ones(4))


def test_logistic_predict_returns_probabilities():
    X = DesignMatrix(_with_intercept([0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), ("intercept", "x"))
    y = np.array([0, 0, 1, 0, 1, 1])
    res = fit_logistic(X, y)
    assert list(res.coefficients.index) == ["intercept", "x"]
    p = res.predict(X)
    assert np.all((p > 0) & (p < 1))
    assert_allclose(p, res.fitted)


# -- OLS ------------------------------------------------------------------------


def test_ols_exact_line():
    x = np.arange(10.0)
    res = fit_ols(_with_intercept(x), 3 + 2 * x)
    assert_allclose(res.params, [3.0, 2.0], atol=1e-12)


def test_ols_intercept_only_is_mean():
    y = np.array([1.0, 4.0, 7.5, -2.0])
    res = fit_ols(np.ones((4, 1)), y)
    assert_allclose(res.params[0], y.mean(), atol=1e-14)


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    oracle = np.linalg.solve(X.T @ X, X.T @ y)
    assert_allclose(fit_ols(X, y).params, oracle, atol=1e-8)


def test_weighted_ols_matches_weighted_normal_equations():
    rng = np.random.default_rng(12)
    X = _with_intercept(rng.normal(size=(30, 2)))
    y = rng.normal(size=30)
    w = rng.uniform(0.2, 3.0, size=30)
    oracle = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    assert_allclose(fit_ols(X, y, weights=w).params, oracle, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 40))
def test_ols_residuals_orthogonal_to_design(seed, n):
    rng = np.random.default_rng(seed)
    X = _with_intercept(rng.normal(size=(n, 2)))
    y = rng.normal(size=n) * 5
    res = fit_ols(X, y)
    resid = y - res.fitted
    assert np.max(np.abs(X.T @ resid)) < 1e-8
    assert_allclose(res.covariance, res.covariance.T, atol=1e-12)


def test_ols_rank_deficiency_names_columns():
    rng = np.random.default_rng(0)
    a = rng.normal(size=10)
    X = DesignMatrix(np.column_stack([np.ones(10), a, 2 * a, rng.normal(size=10)]), ("const", "a", "a2", "b"))
    with pytest.raises(RankDeficientError) as info:
        fit_ols(X, rng.normal(size=10))
    assert set(info.value.columns) == {"a", "a2"}


def test_design_matrix_rejects_non_finite_and_duplicates():
    with pytest.raises(ValueError):
        DesignMatrix(np.array([[1.0, np.nan]]), ("a", "b"))
    with pytest.raises(ValueError):
        DesignMatrix(np.ones((2, 2)), ("a", "a"))


def test_design_matrix_from_frame_adds_intercept():
    df = pd.DataFrame({"age": [50.0, 60.0], "inc": [1.0, 2.0]})
    dm = DesignMatrix.from_frame(df, ["age"])
    assert dm.columns == ("intercept", "age")
    assert_allclose(dm.values, [[1, 50], [1, 60]])


# -- within transform ---------------------------------------------------------------


def _panel_index(n_units, n_years, drop=()):
    u, t = np.meshgrid(np.arange(n_units), np.arange(n_years), indexing="ij")
    u, t = u.ravel(), t.ravel()
    keep = np.ones(u.size, bool)
    keep[list(drop)] = False
    return u[keep], t[keep]


def test_within_constant_panel_is_zero():
    u, t = _panel_index(4, 5)
    assert_allclose(within_transform(np.full(u.size, 7.0), u, t), 0.0, atol=1e-12)


def test_within_absorbs_additive_effects():
    u, t = _panel_index(5, 6, drop=(3, 8, 17))
    a = np.array([1.0, -2.0, 5.0, 0.5, 3.0])
    b = np.array([0.1, 0.4, -1.0, 2.0, 0.0, 1.5])
    assert_allclose(within_transform(a[u] + b[t], u, t), 0.0, atol=1e-9)


@pytest.mark.parametrize("drop", [(), (1, 5)])
def test_within_matches_dummy_regression_residuals(drop):
    rng = np.random.default_rng(5)
    u, t = _panel_index(3, 3, drop=drop)
    y = rng.normal(size=u.size)
    D = np.column_stack([np.ones(u.size)] + [(u == i).astype(float) for i in (1, 2)] + [(t == j).astype(float) for j in (1, 2)])
    beta = np.linalg.lstsq(D, y, rcond=None)[0]
    assert_allclose(within_transform(y, u, t), y - D @ beta, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_within_output_has_zero_group_means(seed):
    rng = np.random.default_rng(seed)
    u, t = _panel_index(8, 6)
    keep = rng.uniform(size=u.size) > 0.25
    keep[:6] = True
    u, t = u[keep], t[keep]
    y = rng.normal(size=(u.size, 2)) * 10
    out = within_transform(y, u, t)
    for codes in (u, t):
        for g in np.unique(codes):
            assert np.all(np.abs(out[codes == g].mean(axis=0)) < 1e-8)


@pytest.mark.parametrize("n_units,n_years", [(40, 6), (5, 30)])
def test_within_exact_and_iterative_agree(n_units, n_years):
    rng = np.random.default_rng(9)
    u, t = _panel_index(n_units, n_years)
    keep = rng.uniform(size=u.size) > 0.3
    u, t = u[keep], t[keep]
    y = rng.normal(size=(u.size, 3))
    exact = within_transform(y, u, t)
    iterative = within_transform(y, u, t, tol=1e-13, dense_limit=0)
    assert_allclose(exact, iterative, atol=1e-9)


# -- cluster-robust covariance ---------------------------------------------------------


def test_singleton_clusters_equal_hc1():
    rng = np.random.default_rng(2)
    n = 40
    X = _with_intercept(rng.normal(size=(n, 2)))
    e = rng.normal(size=n) * (1 + np.abs(X[:, 1]))
    bread = np.linalg.inv(X.T @ X)
    hc1 = n / (n - 3) * bread @ (X.T * e**2) @ X @ bread
    assert_allclose(cluster_robust_cov(X, e, np.arange(n)), hc1, rtol=1e-10)


def test_cluster_sandwich_hand_computation():
    # X'X = [[4,2],[2,2]]; cluster score sums (3,2) and (0,1);
    # bread*meat*bread = [[.5,-.25],[-.25,1.25]]; factor 2/1 * 3/2 = 3.
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    e = np.array([1.0, 2.0, -1.0, 1.0])
    V = cluster_robust_cov(X, e, ["a", "a", "b", "b"])
    assert_allclose(V, [[1.5, -0.75], [-0.75, 3.75]], atol=1e-12)
    assert_allclose(V, V.T, atol=1e-12)


def test_cluster_and_classical_se_agree_under_iid():
    rng = np.random.default_rng(8)
    n, G = 4000, 400
    X = _with_intercept(rng.normal(size=n))
    y = X @ [1.0, 2.0] + rng.normal(size=n)
    res = fit_ols(X, y)
    V = cluster_robust_cov(X, y - res.fitted, np.repeat(np.arange(G), n // G))
    ratio = np.sqrt(np.diag(V) / np.diag(res.covariance))
    assert np.all(np.abs(ratio - 1) < 0.15)


def test_single_cluster_is_an_error():
    with pytest.raises(ValueError):
        cluster_robust_cov(np.ones((3, 1)), np.ones(3), [1, 1, 1])


# -- chi-square ---------------------------------------------------------------------


def test_identical_proportions_give_zero_statistic():
    res = chi_square_homogeneity([[30, 70], [60, 140]])
    assert res.statistic == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0)
    assert res.dof == 1


def test_table_one_shock_distribution_rejects_homogeneity():
    men, women = 30103, 15140
    counts = [
        [round(men * 0.5898), men - round(men * 0.5898)],
        [round(women * 0.5005), women - round(women * 0.5005)],
    ]
    res = chi_square_homogeneity(counts)
    assert res.p_value < 0.005


def test_two_by_two_closed_form():
    a, b, c, d = 23, 17, 12, 31
    n = a + b + c + d
    closed = (a * d - b * c) ** 2 * n / ((a + b) * (c + d) * (a + c) * (b + d))
    assert chi_square_homogeneity([[a, b], [c, d]]).statistic == pytest.approx(closed, rel=1e-12)


@pytest.mark.parametrize("dof", [1, 2, 3, 7, 20])
@pytest.mark.parametrize("x", [0.01, 0.5, 1.0, 3.84, 10.0, 45.0, 300.0])
def test_chi2_tail_matches_reference(dof, x):
    ours = gamma_q(dof / 2, x / 2)
    ref = stats.chi2.sf(x, dof)
    assert ours == pytest.approx(ref, rel=1e-9, abs=1e-300)


def test_zero_marginal_is_an_error():
    with pytest.raises(ValueError):
        chi_square_homogeneity([[0, 5], [0, 7]])
