import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _instances import brute_df_r, brute_hat, brute_loo, random_instance
from hetdof.core import Dataset, WeightScheme
from hetdof.dof import df_r_exact
from hetdof.errors import ConfigError, DegenerateLeverageError, FoldFailureError
from hetdof.risk import (
    RISK_CURVE_COLUMNS,
    PopulationTruth,
    estimate_sigma2,
    excess_bias_hat,
    kfold_cv_error,
    loocv_error,
    oracle_risk,
    risk_curve,
    select_size,
    werr_f_hat,
    werr_r_hat,
    werr_t,
    write_risk_curve,
    xi_components,
    xi_interpretation_check,
    xi_value,
)
from hetdof.wls import fit_design

from test_dof import SMALL_SIGMA, SMALL_TAU, SMALL_X, SMALL_Y

# sympy values for the small instance (sigma2 = 1)
SMALL_RISK = [
    # q, w, werr_t, loocv, delta
    ([1, 2, 1, 2, 1], [1, 2, 1, 2, 1], 269 / 118, 8.068255327426064, 4.600043645774718),
    ([1, 1, 3, 1, 2], [1, 1, 1, 1, 1], 12877 / 9680, 3.0424977560531796, 0.44336122172662623),
    ([1, 1, 3, 1, 2], [2, 1, 1, 3, 1], 347 / 110, 5.545147365127251, 0.7398972124197756),
]


@pytest.mark.parametrize("q,w,wt,loo,delta", SMALL_RISK)
def test_frozen_small_instance(q, w, wt, loo, delta):
    model = fit_design(SMALL_X, SMALL_Y, np.array(q, dtype=float))
    w = np.array(w, dtype=float)
    assert werr_t(SMALL_Y, model.fitted, w) == pytest.approx(wt, rel=1e-12)
    assert loocv_error(model, SMALL_Y, w) == pytest.approx(loo, rel=1e-10)
    d, dp = excess_bias_hat(model, SMALL_Y, w, SMALL_TAU, 1.0)
    assert d == pytest.approx(delta, rel=1e-10)
    assert dp == d


def test_werr_t_examples():
    assert werr_t([1, 2], [1, 2], [1, 1]) == 0
    assert werr_t([1, 2], [0, 1], [1, 2]) == pytest.approx(1.5)
    r = np.array([1.0, -2.0, 0.5])
    assert werr_t(r, np.zeros(3), np.ones(3)) == pytest.approx(np.mean(r**2))
    with pytest.raises(ValueError):
        werr_t([1, 2], [1], [1, 1])


def test_werr_f_hat_reductions():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((30, 4))
    y = rng.standard_normal(30)
    model = fit_design(X, y, np.ones(30))
    ones = np.ones(30)
    assert werr_f_hat(model, y, ones, ones, 2.0) == pytest.approx(np.mean(model.residuals**2) + 2 * 2.0 * 4 / 30)
    null = fit_design(np.zeros((30, 0)), y, ones)
    assert werr_f_hat(null, y, ones, ones, 2.0) == pytest.approx(np.mean(y**2))
    with pytest.raises(ConfigError):
        werr_f_hat(model, y, ones, ones, None)


def test_excess_bias_null_and_saturated():
    rng = np.random.default_rng(1)
    y = rng.standard_normal(6)
    null = fit_design(np.zeros((6, 0)), y, np.ones(6))
    assert excess_bias_hat(null, y, np.ones(6), np.ones(6), 1.0) == (0.0, 0.0)
    sat = fit_design(rng.standard_normal((6, 6)), y, np.ones(6))
    with pytest.raises(DegenerateLeverageError):
        excess_bias_hat(sat, y, np.ones(6), np.ones(6), 1.0)


def test_loocv_error_matches_refits_and_null():
    rng = np.random.default_rng(2)
    X, tau, q, w, _ = random_instance(rng, n=40, p=5)
    y = rng.standard_normal(40)
    model = fit_design(X, y, q)
    assert loocv_error(model, y, w) == pytest.approx(np.mean(w * brute_loo(X, y, q) ** 2), abs=1e-9)
    null = fit_design(np.zeros((40, 0)), y, q)
    assert loocv_error(null, y, w) == pytest.approx(np.mean(w * y**2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 8), st.floats(0.1, 5.0))
def test_werr_r_hat_identities(seed, p, sigma2):
    rng = np.random.default_rng(seed)
    X, tau, q, w, sigma = random_instance(rng, n=30, p=p)
    y = X @ rng.standard_normal(p) + rng.standard_normal(30)
    model = fit_design(X, y, q)
    dfr = df_r_exact(model, tau, w, sigma)
    rep = werr_r_hat(model, y, w, tau, sigma2, dfr)
    n, w_bar = 30, np.mean(w)
    assert rep.excess_bias_hat_plus == max(rep.excess_bias_hat, 0.0)
    assert rep.werr_r_hat == pytest.approx(rep.werr_t + rep.excess_bias_hat_plus + 2 / n * w_bar * sigma2 * dfr.df_r)
    # untruncated form minus LOOCV is sigma2 xi / n
    assert rep.werr_r_hat_untruncated - rep.loocv == pytest.approx(sigma2 * rep.xi / n, abs=1e-9 * max(1, rep.loocv))
    assert rep.forms_agree
    assert rep.werr_r_hat >= 2 / n * w_bar * sigma2 * dfr.df_r - 1e-12


def test_werr_r_hat_null_model():
    y = np.arange(5.0)
    null = fit_design(np.zeros((5, 0)), y, np.ones(5))
    rep = werr_r_hat(null, y, np.ones(5), np.ones(5), 1.0, 0.0)
    assert rep.excess_bias_hat_plus == 0.0
    assert rep.werr_r_hat == pytest.approx(rep.werr_t)


def test_kfold_equals_loocv_when_k_is_n_and_is_deterministic():
    rng = np.random.default_rng(3)
    X, tau, q, w, _ = random_instance(rng, n=25, p=3)
    y = rng.standard_normal(25)
    data = Dataset(X, y)
    scheme = WeightScheme(q, w)
    model = fit_design(X, y, q)
    assert kfold_cv_error(data, scheme, k=25, seed=4) == pytest.approx(loocv_error(model, y, w), abs=1e-9)
    a = kfold_cv_error(data, scheme, k=5, seed=9)
    b = kfold_cv_error(data, scheme, k=5, seed=9)
    assert a == b
    with pytest.raises(ValueError):
        kfold_cv_error(data, scheme, k=1)


def test_kfold_rank_deficient_fold_names_fold():
    X = np.column_stack([np.ones(10), np.r_[np.zeros(9), 1.0]])
    data = Dataset(X, np.arange(10.0))
    with pytest.raises(FoldFailureError) as info:
        kfold_cv_error(data, WeightScheme.equal(10), k=10, seed=0)
    assert info.value.fold is not None


def test_estimate_sigma2_unbiased_under_optimal_weights():
    rng = np.random.default_rng(5)
    X, tau, q, w, _ = random_instance(rng, n=40, p=4, optimal=True)
    mu = X @ np.ones(4)
    draws = []
    for _ in range(4000):
        y = mu + np.sqrt(2.0 * tau) * rng.standard_normal(40)
        draws.append(estimate_sigma2(fit_design(X, y, q), y, w, tau))
    draws = np.array(draws)
    assert abs(draws.mean() - 2.0) < 3 * draws.std() / np.sqrt(len(draws))


# -- oracles -------------------------------------------------------------------


def test_oracle_linear_truth_in_span_has_no_bias():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((30, 3))
    beta = np.array([1.0, -1.0, 0.5])
    model = fit_design(X, X @ beta, np.ones(30))
    truth = PopulationTruth.from_sample(X, np.ones(30), X @ beta, np.ones(30))
    o = oracle_risk(model, X @ beta, np.ones(30), 1.0, truth, np.ones(30))
    assert abs(o.bias) < 1e-10
    assert abs(o.excess_bias_true) < 1e-10


def test_oracle_homoscedastic_reduction_and_decomposition():
    rng = np.random.default_rng(7)
    n, p = 200, 5
    X = rng.standard_normal((n, p))
    model = fit_design(X, np.zeros(n), np.ones(n))
    truth = PopulationTruth.linear(np.ones(p), np.eye(p), 1.0)
    o = oracle_risk(model, X @ np.ones(p), np.ones(n), 1.0, truth, np.ones(n))
    expected = 1 + np.trace(np.linalg.inv(X.T @ X))
    assert o.werr_r_true == pytest.approx(expected, rel=1e-10)
    assert o.werr_r_true == pytest.approx(o.irreducible + o.bias + o.variance)
    assert min(o.irreducible, o.bias, o.variance) >= 0
    # in-sample: sigma2 (1 - p/n) expected training error
    assert o.werr_t_expected == pytest.approx(1 - p / n, rel=1e-10)
    with pytest.raises(ConfigError):
        oracle_risk(model, None, np.ones(n), 1.0, truth, np.ones(n))


def test_oracle_against_monte_carlo_population():
    rng = np.random.default_rng(8)
    n, p = 40, 3
    X = rng.standard_normal((n, p))
    tau = np.exp(rng.normal(0, 0.5, n))
    q = w = 1 / tau
    mu_fn = lambda R: R @ np.array([1.0, 0.5, 0.0]) + 0.5 * R[:, 2] ** 2
    tau_fn = lambda R: np.exp(0.3 * R[:, 0])
    model = fit_design(X[:, :2], np.zeros(n), q)
    pool = rng.standard_normal((200_000, p))
    tstar = tau_fn(pool)
    wstar = 1 / tstar
    truth = PopulationTruth.from_sample(pool[:, :2], wstar, mu_fn(pool), tstar)
    o = oracle_risk(model, mu_fn(X), tau, 1.3, truth, w)
    # direct: predict the pool with the noiseless fit, add noise variance of the fit
    b = np.linalg.solve(X[:, :2].T @ (q[:, None] * X[:, :2]), X[:, :2].T @ (q * mu_fn(X)))
    H = brute_hat(X[:, :2], q)
    hs = pool[:, :2] @ np.linalg.inv(X[:, :2].T @ (q[:, None] * X[:, :2])) @ (X[:, :2] * q[:, None]).T
    direct = np.mean(wstar * (1.3 * tstar + (mu_fn(pool) - pool[:, :2] @ b) ** 2 + 1.3 * (hs**2 @ tau)))
    assert o.werr_r_true == pytest.approx(direct, rel=1e-9)
    assert H.shape == (n, n)


# -- xi --------------------------------------------------------------------------


def test_xi_interpretation_random_instances():
    rng = np.random.default_rng(9)
    for _ in range(10):
        X, tau, q, w, sigma = random_instance(rng, n=30, p=4)
        model = fit_design(X, np.zeros(30), q)
        assert abs(xi_interpretation_check(model, sigma, tau, w, 1.7)) < 1e-8


def test_xi_homoscedastic_empirical_and_value():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((25, 3))
    model = fit_design(X, np.zeros(25), np.ones(25))
    ones = np.ones(25)
    sigma = X.T @ X / 25
    assert abs(xi_interpretation_check(model, sigma, ones, ones, 1.0)) < 1e-10
    h = np.diag(model.hat.hat_matrix)
    M = np.eye(25) - model.hat.hat_matrix
    A = M.T @ np.diag(1 / (1 - h) ** 2 - 1) @ M
    assert xi_value(model, ones, ones, 3.0) == pytest.approx(2 * 3.0 - np.trace(A))


def test_xi_excess_irreducible_small_for_large_n():
    rng = np.random.default_rng(11)
    n = 2000
    X = rng.standard_normal((n, 3))
    tau = np.exp(rng.normal(0, 0.5, n))
    tau /= tau.mean()
    model = fit_design(X, np.zeros(n), 1 / tau)
    parts = xi_components(model, np.eye(3), tau, 1 / tau, 1.0)
    # with w = 1/tau both irreducible terms equal sigma2 exactly
    assert parts["sample_irreducible"] == pytest.approx(1.0)
    assert parts["new_point_variance"] < 0.01 * parts["loo_variance"]


# -- selection and curves ----------------------------------------------------------


def test_select_size_ties_and_nan():
    assert select_size([0, 1, 2, 3], [3.0, 1.0, 1.0, 2.0]) == 1
    assert select_size([3, 2, 1], [1.0, 1.0, 5.0]) == 2
    assert select_size([1, 2, 3], [np.nan, 2.0, 1.0]) == 3
    with pytest.raises(ValueError):
        select_size([1, 2], [np.nan, np.nan])


def test_risk_curve_and_export(tmp_path):
    rng = np.random.default_rng(12)
    n, m = 50, 4
    tau = rng.uniform(0.5, 2, n)
    X = rng.standard_normal((n, m))
    data = Dataset(X, X @ np.ones(m) + np.sqrt(tau) * rng.standard_normal(n), variance_factors=tau)
    scheme = WeightScheme.inverse_tau(tau)
    sigma = np.eye(m) / scheme.eval_weight_mean
    rows = risk_curve(data, scheme, 1.0, sigma=sigma, k=5, seed=1)
    assert [r["p"] for r in rows] == [0, 1, 2, 3, 4]
    model = fit_design(X[:, :2], data.response, scheme.fit_weights)
    assert rows[2]["df_r"] == pytest.approx(brute_df_r(X[:, :2], 1 / tau, 1 / tau, tau, sigma[:2, :2]))
    path = tmp_path / "risk.csv"
    write_risk_curve(rows, path)
    with open(path) as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == RISK_CURVE_COLUMNS
    with pytest.raises(ConfigError):
        risk_curve(data, scheme, None)
    assert model.p == 2
