"""Classical and predictive model degrees of freedom for weighted least squares.

Notation follows the module-wide convention: ``q`` are fitting weights,
``w`` evaluation weights with mean ``w_bar``, ``tau`` relative error
variances and ``sigma`` the normalised moment matrix ``E(w* x x^T) / w_bar``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import CovariateModel, Dataset, WeightScheme, as_rng, moment_matrix, seed_sequence
from .errors import (
    ApproximationUndefinedError,
    DimensionError,
    IncrementUndefinedError,
    InvalidVarianceError,
)
from .wls import FittedWLS, HatOperator, fit, fit_design

DF_CURVE_COLUMNS = ("p", "df_f", "df_r", "df_r_mc", "df_r_mc_se", "df_r_approx", "zeta_tau", "n_tau")


@dataclass(frozen=True)
class DofPair:
    """Both degrees of freedom of one fitted model.

    ``df_r_se`` is the Monte-Carlo standard error of ``df_r`` (zero when
    ``df_r`` is exact).
    """

    df_f: float
    df_r: float
    excess_variance_term: float
    subset_size: int
    df_r_se: float = 0.0


@dataclass(frozen=True, eq=False)
class IncrementReport:
    delta_df_f: float
    delta_df_r: float
    residual_vector: np.ndarray
    population_residual: np.ndarray
    schur_scalar: float
    terms: tuple = ()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _split(model):
    """Return ``(hat, column_subset or None)`` for a fit or a bare hat operator."""
    if isinstance(model, FittedWLS):
        return model.hat, model.column_subset
    if isinstance(model, HatOperator):
        return model, None
    raise TypeError(f"expected FittedWLS or HatOperator, got {type(model).__name__}")


def _eval_weights(w, n):
    values = w.eval_weights if isinstance(w, WeightScheme) else np.asarray(w, dtype=float)
    if values.shape != (n,):
        raise DimensionError(f"expected {n} evaluation weights, got shape {values.shape}")
    return values


def _tau(tau, n):
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (n,):
        raise DimensionError(f"expected {n} variance factors, got shape {tau.shape}")
    if not np.all(tau > 0):
        raise InvalidVarianceError("variance factors must be positive")
    return tau


def _restrict_sigma(sigma, p, subset):
    """Moment matrix over the model columns.

    When the model carries its column subset and ``sigma`` is large enough to
    be indexed by it, ``sigma`` is read as a full-design matrix; otherwise it
    must already be ``p x p`` in model column order.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 2 and sigma.shape[0] == sigma.shape[1]:
        if subset is not None and (p == 0 or max(subset) < sigma.shape[0]):
            idx = np.asarray(subset, dtype=int)
            return sigma[np.ix_(idx, idx)]
        if sigma.shape == (p, p):
            return sigma
    raise DimensionError(f"sigma of shape {sigma.shape} does not match a {p}-column model")


def _restrict_rows(rows, p, subset):
    """Covariate rows over the model columns (same convention as the moment matrix)."""
    if subset is not None and (p == 0 or max(subset) < rows.shape[1]):
        return rows[:, list(subset)]
    if rows.shape[1] == p:
        return rows
    raise DimensionError(f"rows have {rows.shape[1]} columns, model has {p}")


# ---------------------------------------------------------------------------
# variance summaries
# ---------------------------------------------------------------------------


def zeta_tau(tau) -> float:
    """Harmonic mean of the variance factors."""
    tau = np.asarray(tau, dtype=float)
    if tau.size == 0 or not np.all(tau > 0):
        raise InvalidVarianceError("variance factors must be positive")
    return float(1.0 / np.mean(1.0 / tau))


def effective_sample_size(tau) -> int:
    """Nearest integer (ties to even) to ``(sum 1/tau)^2 / sum 1/tau^2``."""
    tau = np.asarray(tau, dtype=float)
    if tau.size == 0 or not np.all(tau > 0):
        raise InvalidVarianceError("variance factors must be positive")
    inv = 1.0 / tau
    return int(np.rint(inv.sum() ** 2 / np.sum(inv**2)))


def weight_path(alpha: float, tau) -> np.ndarray:
    """Fitting weights ``1 / (alpha + (1 - alpha) tau)`` between ``1/tau`` and equal weights."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    tau = np.asarray(tau, dtype=float)
    if not np.all(tau > 0):
        raise InvalidVarianceError("variance factors must be positive")
    return 1.0 / (alpha + (1.0 - alpha) * tau)


# ---------------------------------------------------------------------------
# df_F and df_R
# ---------------------------------------------------------------------------


def df_f_linear(hat, tau, w) -> float:
    """``tr(H T W) / w_bar``."""
    hat, _ = _split(hat)
    n = hat.n
    tau = _tau(tau, n)
    w = _eval_weights(w, n)
    return float(np.sum(hat.leverages * tau * w) / np.mean(w))


def _in_sample_variance(hat, tau, w):
    """``tr(W H T H^T) / n``, the in-sample average of ``w_i ||h_i||_T^2``."""
    H = hat.hat_matrix
    return float(np.sum(w[:, None] * H**2 * tau[None, :]) / hat.n)


def df_r_exact(hat, tau, w, sigma) -> DofPair:
    """Predictive degrees of freedom from the closed-form WLS expression.

    ``df_R = df_F + (n/2) tr[G (Sigma - X^T W X / (n w_bar))]`` with
    ``G = (X^T Q X)^{-1} X^T Q T Q X (X^T Q X)^{-1}``.
    """
    hat, subset = _split(hat)
    n, p = hat.n, hat.p
    tau = _tau(tau, n)
    w = _eval_weights(w, n)
    sigma = _restrict_sigma(sigma, p, subset)
    df_f = df_f_linear(hat, tau, w)
    if p == 0:
        return DofPair(df_f, df_f, 0.0, 0)
    X = hat.design
    G = hat.variance_form(tau)
    R = sigma - (X * w[:, None]).T @ X / (n * np.mean(w))
    excess = 0.5 * n * float(np.sum(G * R))
    return DofPair(df_f, df_f + excess, excess, p)


def dfr_from_rows(hat, tau, w, rows, wstar) -> DofPair:
    """Monte-Carlo ``df_R`` from explicit covariate rows and their weights."""
    hat, subset = _split(hat)
    n, p = hat.n, hat.p
    tau = _tau(tau, n)
    w = _eval_weights(w, n)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    wstar = np.asarray(wstar, dtype=float).reshape(-1)
    B = rows.shape[0]
    df_f = df_f_linear(hat, tau, w)
    if p == 0:
        return DofPair(df_f, df_f, 0.0, 0, 0.0)
    rows = _restrict_rows(rows, p, subset)
    G = hat.variance_form(tau)
    terms = wstar * np.einsum("bi,ij,bj->b", rows, G, rows)
    scale = n / (2.0 * np.mean(w))
    excess = scale * (terms.mean() - _in_sample_variance(hat, tau, w))
    se = scale * terms.std(ddof=1) / math.sqrt(B) if B > 1 else float("inf")
    return DofPair(df_f, df_f + excess, excess, p, float(se))


def df_r_monte_carlo(hat, tau, w, cov: CovariateModel, B: int = 10_000, seed=0) -> DofPair:
    """Predictive degrees of freedom with ``E(w* ||h*||_T^2)`` replaced by a sample mean.

    The covariate model may describe the full design; rows are restricted to
    the fitted columns when ``hat`` is a :class:`FittedWLS`.
    """
    if B < 100:
        raise ValueError(f"B must be at least 100, got {B}")
    rows, wstar = cov.sample(B, seed)
    return dfr_from_rows(hat, tau, w, rows, wstar)


def df_r_normal_approx(p: int, zeta: float, n_tau: int) -> float:
    """Gaussian-design approximation ``(p/2) zeta (1 + n_tau / (n_tau - p - 1))``."""
    if n_tau <= p + 1:
        raise ApproximationUndefinedError(f"approximation needs n_tau > p + 1 (n_tau={n_tau}, p={p})")
    return 0.5 * p * zeta * (1.0 + n_tau / (n_tau - p - 1.0))


# ---------------------------------------------------------------------------
# nested-subset increments
# ---------------------------------------------------------------------------


def increment_df(hat_p, new_column, tau, w, sigma_p, phi, sigma2_next) -> IncrementReport:
    """Closed-form change in ``df_F`` and ``df_R`` when one column is appended.

    Valid when fitting and evaluation weights coincide (up to scale).
    ``sigma_p``, ``phi`` and ``sigma2_next`` are the blocks of the moment
    matrix for the current columns, their cross moment with the new column
    and the new column's own moment.
    """
    hat, _ = _split(hat_p)
    n, p = hat.n, hat.p
    tau = _tau(tau, n)
    w = _eval_weights(w, n)
    ratio = hat.fit_weights / w
    if np.ptp(ratio) > 1e-10 * np.max(ratio):
        raise ValueError("increment formulas require fitting weights proportional to evaluation weights")
    x_new = np.asarray(new_column, dtype=float).reshape(-1)
    if x_new.shape != (n,):
        raise DimensionError("new column must have one entry per case")
    sigma_p = np.atleast_2d(np.asarray(sigma_p, dtype=float)).reshape(p, p)
    phi = np.asarray(phi, dtype=float).reshape(p)

    w_bar = float(np.mean(w))
    root = np.sqrt(w / w_bar)
    xt = hat.design * root[:, None]
    xn = x_new * root
    u = w * tau / w_bar

    if p:
        coef, *_ = np.linalg.lstsq(xt, xn, rcond=None)
        r = xn - xt @ coef
        gram_inv = np.linalg.inv(xt.T @ xt)
        K = xt @ gram_inv
        pop_coef = np.linalg.solve(sigma_p, phi)
        schur = float(sigma2_next - phi @ pop_coef)
        v = xn - xt @ pop_coef
    else:
        r = xn.copy()
        K = np.zeros((n, 0))
        schur = float(sigma2_next)
        v = xn.copy()
    rr = float(r @ r)
    if rr <= (1e-10 * np.linalg.norm(xn)) ** 2:
        raise IncrementUndefinedError("new column lies in the span of the current columns")

    delta_f = float(r @ (u * r)) / rr
    # M = K sigma_p K^T, applied through its factors
    Kv = K.T @ v
    v_m_v = float(Kv @ sigma_p @ Kv)
    t1 = 0.5 * delta_f
    t2 = 0.5 * n * delta_f * (v_m_v + schur) / rr
    t3 = -n * float((K.T @ (u * r)) @ sigma_p @ Kv) / rr
    r.setflags(write=False)
    v.setflags(write=False)
    return IncrementReport(delta_f, t1 + t2 + t3, r, v, schur, (t1, t2, t3))


# ---------------------------------------------------------------------------
# sensitivity to the fitting weights
# ---------------------------------------------------------------------------


def df_r_gradient_q(data, q, tau, sigma) -> np.ndarray:
    """Gradient of ``df_R`` with respect to the fitting weights, evaluation weights fixed at ``1/tau``.

    ``n diag((I - H) T Q X C R C X^T)`` with ``C = (X^T Q X)^{-1}`` and
    ``R = Sigma - X^T T^{-1} X / (n w_bar)``.
    """
    X = data.design if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=float))
    n, p = X.shape
    q = np.asarray(q, dtype=float)
    tau = _tau(tau, n)
    sigma = _restrict_sigma(sigma, p, None)
    hat = fit_design(X, np.zeros(n), q).hat
    core, H = hat.projector_core, hat.hat_matrix
    w = 1.0 / tau
    R = sigma - (X * w[:, None]).T @ X / (n * np.mean(w))
    A = (np.eye(n) - H) @ ((X * (tau * q)[:, None]) @ core)
    return n * np.sum(A * (X @ core @ R), axis=1)


# ---------------------------------------------------------------------------
# representation diagnostics
# ---------------------------------------------------------------------------


def representation_check(model, cov, tau, w, mode: str = "covariance") -> float:
    """Evaluate ``df_R - df_F`` through a per-case representation.

    ``covariance`` sums squared covariances between each response and the
    predictions (read off the hat matrix and the hat-vector second moment);
    ``gdf`` sums squared sensitivities of the mean predictions to each
    true mean, obtained by refitting unit responses. ``cov`` is either the
    moment matrix or a :class:`CovariateModel`.
    """
    hat, subset = _split(model)
    n, p = hat.n, hat.p
    tau = _tau(tau, n)
    wv = _eval_weights(w, n)
    w_bar = float(np.mean(wv))
    if p == 0:
        return 0.0
    if isinstance(cov, CovariateModel):
        scheme = w if isinstance(w, WeightScheme) else WeightScheme(hat.fit_weights, wv)
        sigma = moment_matrix(cov, scheme)
    else:
        sigma = cov
    sigma = _restrict_sigma(sigma, p, subset)
    X = hat.design
    if mode == "covariance":
        qx = hat.weighted_design
        # E(w* h* h*^T) = Q X C (w_bar Sigma) C X^T Q, only its diagonal is needed
        left = qx @ hat.projector_core
        out_sample = w_bar * np.einsum("ij,jk,ik->i", left, sigma, left)
        in_sample = np.sum(wv[:, None] * hat.hat_matrix**2, axis=0) / n
    elif mode == "gdf":
        # sensitivity of the coefficients to each mu_i: refit the unit responses
        sens = np.column_stack(
            [fit_design(X, np.eye(n)[i], hat.fit_weights).coefficients for i in range(n)]
        )
        out_sample = w_bar * np.einsum("ki,kl,li->i", sens, sigma, sens)
        in_sample = np.sum(wv[:, None] * (X @ sens) ** 2, axis=0) / n
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(n / (2.0 * w_bar) * np.sum(tau * (out_sample - in_sample)))


# ---------------------------------------------------------------------------
# df curves along nested subsets
# ---------------------------------------------------------------------------


def df_curve(
    data: Dataset,
    scheme: WeightScheme,
    tau=None,
    subsets=None,
    sigma=None,
    cov: CovariateModel | None = None,
    B: int = 1000,
    seed=0,
) -> list[dict]:
    """Degrees of freedom for each model along a nested subset path.

    Returns one dict per model with the keys of :data:`DF_CURVE_COLUMNS`.
    ``sigma`` (full-design moment matrix) enables exact ``df_R``; ``cov``
    enables the Monte-Carlo estimate. Missing quantities are NaN.
    """
    tau = data.variance_factors if tau is None else np.asarray(tau, dtype=float)
    if tau is None:
        tau = np.ones(data.n)
    subsets = data.nested_subsets()[1:] if subsets is None else subsets
    zeta, n_tau = zeta_tau(tau), effective_sample_size(tau)
    seeds = seed_sequence(seed).spawn(len(subsets))
    rows = []
    for cols, ss in zip(subsets, seeds):
        model = fit(data, scheme, cols)
        p = model.p
        rec = dict.fromkeys(DF_CURVE_COLUMNS, float("nan"))
        rec.update(p=p, df_f=df_f_linear(model, tau, scheme), zeta_tau=zeta, n_tau=n_tau)
        if sigma is not None:
            rec["df_r"] = df_r_exact(model, tau, scheme, sigma).df_r
        if cov is not None:
            mc = df_r_monte_carlo(model, tau, scheme, cov, B, as_rng(ss))
            rec["df_r_mc"], rec["df_r_mc_se"] = mc.df_r, mc.df_r_se
        try:
            rec["df_r_approx"] = df_r_normal_approx(p, zeta, n_tau)
        except ApproximationUndefinedError:
            pass
        rows.append(rec)
    return rows


def write_curve(rows, path, columns=DF_CURVE_COLUMNS):
    """Write curve records as CSV (empty field for NaN)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in rows:
            writer.writerow([_fmt(rec.get(c)) for c in columns])


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    return str(value)
