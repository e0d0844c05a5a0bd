"""Acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line (also echoed in the
terminal summary). Library results are compared with independent oracles
from ``_instances`` or with direct simulation.
"""

import math
import time

import numpy as np
import pytest

from _instances import brute_df_f, brute_df_r, brute_hat, brute_loo, random_instance, random_spd
from hetdof.core import WeightScheme
from hetdof.dof import df_f_linear, df_r_exact, df_r_gradient_q, increment_df, zeta_tau
from hetdof.risk import oracle_risk, werr_r_hat, xi_interpretation_check, xi_value
from hetdof.simlab import (
    Scenario,
    approximation_study,
    figure1_scenario,
    generate,
    nested_columns,
    population_truth,
    run_estimator_comparison,
    run_weight_study,
    summarize_comparison,
    summarize_weights,
)
from hetdof.synth import demo_rows, dfr_from_synthetic, joint_synthesis_demo, synthesize
from hetdof.wls import fit, fit_design, loocv_residuals

pytestmark = pytest.mark.acceptance


def test_criterion_01_homoscedastic_reductions(verdict):
    rng = np.random.default_rng(101)
    worst = 0.0
    for n, p in [(20, 1), (40, 5), (100, 12), (100, 30)]:
        X = rng.standard_normal((n, p))
        ones = np.ones(n)
        model = fit_design(X, np.zeros(n), ones)
        sigma = random_spd(rng, p)
        pair = df_r_exact(model, ones, ones, sigma)
        # excess variance term of the unweighted definition: (n/2)(E||h*||^2 - tr(H^T H)/n)
        excess = n / 2 * (np.trace(np.linalg.solve(X.T @ X, sigma)) - p / n)
        same = df_r_exact(model, ones, ones, X.T @ X / n)
        worst = max(worst, abs(pair.df_f - p), abs(pair.df_r - pair.df_f - excess), abs(same.df_r - same.df_f))
    verdict(1, worst < 1e-8, f"max abs deviation {worst:.2e} (tol 1e-8)")


def test_criterion_02_optimal_weight_closed_forms(verdict):
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(5):
        n, d = 80, 12
        X, tau, q, w, sigma = random_instance(rng, n=n, p=d, optimal=True)
        zeta = zeta_tau(tau)
        for p in range(1, d + 1):
            model = fit_design(X[:, :p], np.zeros(n), q)
            worst = max(worst, abs(df_f_linear(model, tau, w) - zeta * p))
        for p in range(d):
            model = fit_design(X[:, :p], np.zeros(n), q)
            rep = increment_df(model, X[:, p], tau, w, sigma[:p, :p], sigma[:p, p], sigma[p, p])
            worst = max(worst, abs(rep.delta_df_f - zeta))
    verdict(2, worst < 1e-8, f"max |df_F - zeta p|, |increment - zeta| = {worst:.2e} (tol 1e-8)")


def test_criterion_03_increment_formulas(verdict):
    rng = np.random.default_rng(103)
    start = time.perf_counter()
    worst = third = 0.0
    n = 100
    for k in range(100):
        d = int(rng.integers(1, 31))
        p = d - 1
        X, tau, q, w, sigma = random_instance(rng, n=n, p=d, same=True)
        small = fit_design(X[:, :p], np.zeros(n), q)
        rep = increment_df(small, X[:, p], tau, w, sigma[:p, :p], sigma[:p, p], sigma[p, p])
        direct_f = brute_df_f(X, q, w, tau) - (brute_df_f(X[:, :p], q, w, tau) if p else 0.0)
        direct_r = brute_df_r(X, q, w, tau, sigma) - (brute_df_r(X[:, :p], q, w, tau, sigma[:p, :p]) if p else 0.0)
        worst = max(worst, abs(rep.delta_df_f - direct_f), abs(rep.delta_df_r - direct_r))
        if k % 10 == 0:
            opt = 1.0 / tau
            small_o = fit_design(X[:, :p], np.zeros(n), opt)
            rep_o = increment_df(small_o, X[:, p], tau, opt, sigma[:p, :p], sigma[:p, p], sigma[p, p])
            third = max(third, abs(rep_o.terms[2]))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and third < 1e-10 and elapsed < 60
    verdict(3, ok, f"max increment error {worst:.2e}, optimal third term {third:.2e}, {elapsed:.1f}s")


def test_criterion_04_gradient(verdict):
    rng = np.random.default_rng(104)
    start = time.perf_counter()
    worst_rel = worst_norm = 0.0
    for _ in range(20):
        n, p = 25, int(rng.integers(1, 5))
        X, tau, _, _, sigma = random_instance(rng, n=n, p=p)
        q = rng.uniform(0.3, 3.0, n)
        w = 1.0 / tau
        grad = df_r_gradient_q(X, q, tau, sigma)
        for i in range(n):
            h = 1e-5 * q[i]
            up, dn = q.copy(), q.copy()
            up[i] += h
            dn[i] -= h
            fd = (brute_df_r(X, up, w, tau, sigma) - brute_df_r(X, dn, w, tau, sigma)) / (2 * h)
            worst_rel = max(worst_rel, abs(grad[i] - fd) / abs(fd))
        worst_norm = max(worst_norm, float(np.linalg.norm(df_r_gradient_q(X, w, tau, sigma))))
    elapsed = time.perf_counter() - start
    ok = worst_rel < 1e-4 and worst_norm < 1e-8 and elapsed < 60
    verdict(4, ok, f"max rel error {worst_rel:.2e}, norm at 1/tau {worst_norm:.2e}, {elapsed:.1f}s")


def test_criterion_05_monte_carlo_df(verdict):
    rng = np.random.default_rng(105)
    start = time.perf_counter()
    B, n, sigma2 = 100_000, 30, 1.5
    worst = 0.0
    for _ in range(10):
        p = int(rng.integers(1, 8))
        X, tau, q, w, _ = random_instance(rng, n=n, p=p)
        mu = X @ rng.standard_normal(p) + rng.standard_normal(n)
        H = brute_hat(X, q)
        Y = mu + np.sqrt(sigma2 * tau) * rng.standard_normal((B, n))
        Yhat = Y @ H.T
        Yc, Fc = Y - Y.mean(axis=0), Yhat - Yhat.mean(axis=0)
        # per-draw contributions to sum_i w_i Cov(yhat_i, y_i) / (sigma2 w_bar)
        z = (Fc * Yc) @ w / (sigma2 * np.mean(w)) * B / (B - 1)
        est, se = z.mean(), z.std(ddof=1) / math.sqrt(B)
        exact = df_f_linear(fit_design(X, mu, q), tau, w)
        worst = max(worst, abs(est - exact) / se)
    elapsed = time.perf_counter() - start
    verdict(5, worst < 3 and elapsed < 120, f"max |MC - tr(HTW)/w_bar| = {worst:.2f} SE, {elapsed:.1f}s")


def test_criterion_06_loocv_identity(verdict):
    rng = np.random.default_rng(106)
    worst = 0.0
    for n in (15, 50, 100):
        for equal in (True, False):
            p = 4
            X = rng.standard_normal((n, p))
            y = X @ rng.standard_normal(p) + rng.standard_normal(n)
            q = np.ones(n) if equal else np.exp(rng.normal(0, 0.7, n))
            fast = loocv_residuals(fit_design(X, y, q), y)
            worst = max(worst, float(np.max(np.abs(fast - brute_loo(X, y, q)))))
    verdict(6, worst < 1e-9, f"max |shortcut - refit| = {worst:.2e} (tol 1e-9)")


def test_criterion_07_demo(verdict):
    start = time.perf_counter()
    rows = demo_rows(seed=0)
    X = rows[:, :-1]
    n = X.shape[0]
    truth = 1.0 + float(np.trace(np.linalg.inv(X.T @ X)))
    ones = np.ones(n)
    dfr = dfr_from_synthetic(fit_design(X, rows[:, -1], ones), ones, ones, synthesize(X, "nbe", B=5000, seed=7, categorical=[]))
    rng = np.random.default_rng(107)
    estimates = []
    for _ in range(200):
        y = X.sum(axis=1) + rng.standard_normal(n)
        estimates.append(werr_r_hat(fit_design(X, y, ones), y, ones, ones, 1.0, dfr).werr_r_hat)
    mean = float(np.mean(estimates))
    cart = joint_synthesis_demo(rows, "cart", B=1000, seed=1, repeats=5)
    nbe = joint_synthesis_demo(rows, "nbe", B=1000, seed=1, repeats=5)
    elapsed = time.perf_counter() - start
    ok = (abs(truth - 1.027) < 0.01 and abs(mean - truth) <= 0.05
          and cart.mean > 2 * truth and nbe.mean > 2 * truth and elapsed < 300)
    verdict(7, ok, f"truth {truth:.4f}, werr_r_hat mean {mean:.4f}, joint CART {cart.mean:.3f}, "
                   f"joint NBE {nbe.mean:.3f}, {elapsed:.1f}s")


def test_criterion_08_normal_approximation(verdict):
    start = time.perf_counter()
    mild = approximation_study(figure1_scenario(0.5))
    n_tau = mild[0]["n_tau"]
    near = [abs(r["rel_error"]) for r in mild if r["p"] <= n_tau / 2]
    skew = approximation_study(figure1_scenario(3.0))
    valid = [r for r in skew if not math.isnan(r["df_r_approx"])]
    last = valid[-1]
    elapsed = time.perf_counter() - start
    ok = max(near) < 0.10 and last["rel_error"] > 0 and elapsed < 120
    verdict(8, ok, f"lambda=0.5 max rel error {max(near):.3f} for p <= {n_tau / 2:.0f}; "
                   f"lambda=3 rel error {last['rel_error']:+.3f} at p={last['p']}, {elapsed:.1f}s")


def test_criterion_09_estimator_comparison(verdict):
    start = time.perf_counter()
    res = run_estimator_comparison(Scenario(), R=100, B=1000)
    summary = summarize_comparison(res.records, res.selections)
    mse, sel = summary["mse"], summary["selection"]
    others = [k for k in mse if k != "werr_r_hat"]
    large = [p for p in mse["werr_r_hat"] if p >= 30]
    mse_ok = bool(large) and all(mse["werr_r_hat"][p] < min(mse[k].get(p, np.inf) for k in others) for p in large)
    iqr_ok = sel["werr_r_hat"]["iqr_diff"] <= min(sel[k]["iqr_diff"] for k in others)
    gap = {k: abs(v["mean_ratio"] - 1) for k, v in sel.items()}
    ratio_ok = gap["werr_r_hat"] <= min(gap[k] for k in others)
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{k}: iqr {sel[k]['iqr_diff']:.1f} ratio {sel[k]['mean_ratio']:.3f}" for k in sel)
    verdict(9, mse_ok and iqr_ok and ratio_ok and elapsed < 1200,
            f"mse smallest for p>=30 {mse_ok}, iqr {iqr_ok}, ratio {ratio_ok}; {detail}; {elapsed:.0f}s")


def test_criterion_10_weight_misspecification(verdict):
    start = time.perf_counter()
    res = run_weight_study(Scenario(), R=100)
    means = {k: v["mean"] for k, v in summarize_weights(res.selections).items()}
    ok = all(means[f"ols:{c}"] < means[f"wls:{c}"] for c in ("werr_f_hat", "werr_r_hat"))
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{k} {v:.2f}" for k, v in sorted(means.items()))
    verdict(10, ok and elapsed < 900, f"mean selected size: {detail}; {elapsed:.0f}s")


def test_criterion_11_unbiasedness(verdict):
    start = time.perf_counter()
    sc = Scenario(n=40, d_continuous=3, d_categorical=3, pilot_size=50_000, seed=111)
    cols = next(c for c in nested_columns(sc) if len(c) == 5)
    truth = population_truth(sc)
    est, oracle = [], []
    for r in range(5000):
        data = generate(sc, r)
        scheme = WeightScheme.inverse_tau(data.variance_factors)
        model = fit(data, scheme, cols)
        tau = data.variance_factors
        rep = werr_r_hat(model, data.response, scheme, tau, sc.noise_scale, 0.0)
        est.append(rep.werr_f_hat)
        oracle.append(oracle_risk(model, data.true_mean, tau, sc.noise_scale, truth, scheme).werr_f_true)
    diff = np.array(est) - np.array(oracle)
    z = diff.mean() / (diff.std(ddof=1) / math.sqrt(diff.size))
    elapsed = time.perf_counter() - start
    verdict(11, abs(z) < 3 and elapsed < 300,
            f"mean werr_f_hat {np.mean(est):.4f} vs oracle {np.mean(oracle):.4f}, z = {z:+.2f}, {elapsed:.0f}s")


def _xi_by_refits(X, q, w, tau, sigma, sigma2):
    """Variance reading of ``sigma2 xi / n`` from explicit leave-one-out refits."""
    n = X.shape[0]
    w_bar = np.mean(w)
    C = np.linalg.inv(X.T @ (q[:, None] * X))
    M = C @ X.T @ np.diag(q * tau * q) @ X @ C
    new_point = sigma2 * w_bar * np.trace(M @ sigma)
    loo = 0.0
    for i in range(n):
        keep = np.arange(n) != i
        Xk, qk = X[keep], q[keep]
        h = qk * (Xk @ np.linalg.solve(Xk.T @ (qk[:, None] * Xk), X[i]))
        loo += w[i] * sigma2 * (tau[i] + h @ (tau[keep] * h))
    return new_point - loo / n + sigma2 * np.mean(w * tau)


def test_criterion_12_xi_identity(verdict):
    rng = np.random.default_rng(112)
    worst = 0.0
    for _ in range(20):
        n, p = 40, int(rng.integers(1, 7))
        X, tau, q, w, sigma = random_instance(rng, n=n, p=p, same=True)
        sigma2 = float(rng.uniform(0.5, 3.0))
        model = fit_design(X, np.zeros(n), q)
        rhs = sigma2 * xi_value(model, w, tau, df_r_exact(model, tau, w, sigma)) / n
        worst = max(worst, abs(_xi_by_refits(X, q, w, tau, sigma, sigma2) - rhs),
                    abs(xi_interpretation_check(model, sigma, tau, w, sigma2)))
    verdict(12, worst < 1e-8, f"max |variance reading - sigma2 xi / n| = {worst:.2e} (tol 1e-8)")
