"""Training error, covariance-penalty risk estimates and cross-validation baselines.

All risks are weighted by the evaluation weights ``w`` and averaged over
``n``. ``sigma2`` is the error variance scale and must be supplied; see
:func:`estimate_sigma2` for a plug-in when it is unknown.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import Dataset, WeightScheme, as_rng
from .dof import DofPair, _eval_weights, _restrict_sigma, _split, _tau, df_f_linear, df_r_exact, write_curve
from .errors import ConfigError, FoldFailureError, SingularDesignError
from .wls import FittedWLS, check_leverages, fit, fit_design, loocv_residuals

RISK_CURVE_COLUMNS = (
    "p", "werr_t", "delta_hat", "delta_plus", "df_f", "df_r",
    "werr_f_hat", "werr_r_hat", "loocv", "kfold", "xi",
)


@dataclass(frozen=True)
class RiskReport:
    """Risk estimates for one fitted model.

    ``forms_agree`` records whether ``loocv + sigma2 * xi / n`` reproduces the
    untruncated estimate; the truncated ``werr_r_hat`` exceeds it by exactly
    ``excess_bias_hat_plus - excess_bias_hat``.
    """

    werr_t: float
    excess_bias_hat: float
    excess_bias_hat_plus: float
    df_f: float
    df_r: float
    werr_f_hat: float
    werr_r_hat: float
    loocv: float
    kfold: float | None
    xi: float
    sigma2: float
    subset_size: int = 0
    forms_agree: bool = True

    @property
    def werr_r_hat_untruncated(self) -> float:
        return self.werr_r_hat - self.excess_bias_hat_plus + self.excess_bias_hat


@dataclass(frozen=True)
class OracleRisk:
    """Population-level risks of one fitted model, conditional on the design.

    ``werr_r_true = irreducible + bias + variance``. ``werr_t_expected`` and
    ``werr_f_true`` average over the training noise only.
    """

    werr_r_true: float
    werr_t_expected: float
    excess_bias_true: float
    irreducible: float
    bias: float
    variance: float
    werr_f_true: float = float("nan")


@dataclass(frozen=True, eq=False)
class PopulationTruth:
    """Moments of the new-point distribution needed by :func:`oracle_risk`.

    Parameters
    ----------
    second_moment : ndarray (m, m)
        ``E(w* x* x*^T)`` over the full design.
    cross_moment : ndarray (m,)
        ``E(w* x* mu*)``.
    mean_square : float
        ``E(w* mu*^2)``.
    expected_wtau : float
        ``E(w* tau*)``.
    """

    second_moment: np.ndarray
    cross_moment: np.ndarray
    mean_square: float
    expected_wtau: float

    @classmethod
    def linear(cls, coef, second_moment, expected_wtau):
        """Truth ``mu* = x*^T coef``."""
        coef = np.asarray(coef, dtype=float)
        M = np.asarray(second_moment, dtype=float)
        return cls(M, M @ coef, float(coef @ M @ coef), float(expected_wtau))

    @classmethod
    def from_sample(cls, rows, wstar, mu, tau):
        """Plug-in moments from a large pool of population draws."""
        rows = np.asarray(rows, dtype=float)
        wstar = np.asarray(wstar, dtype=float)
        mu = np.asarray(mu, dtype=float)
        B = rows.shape[0]
        M = (rows * wstar[:, None]).T @ rows / B
        return cls(0.5 * (M + M.T), rows.T @ (wstar * mu) / B, float(np.mean(wstar * mu**2)),
                   float(np.mean(wstar * np.asarray(tau, dtype=float))))


def _sigma2(sigma2):
    if sigma2 is None:
        raise ConfigError("sigma2 is required; pass a known value or use estimate_sigma2")
    sigma2 = float(sigma2)
    if not sigma2 >= 0 or not math.isfinite(sigma2):
        raise ConfigError(f"sigma2 must be a nonnegative finite number, got {sigma2}")
    return sigma2


def _response(model, y):
    return model.fitted + model.residuals if y is None else np.asarray(y, dtype=float)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def werr_t(y, fitted, w) -> float:
    """Weighted training error ``(1/n) sum w_i (y_i - mu_hat_i)^2``."""
    y = np.asarray(y, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    w = w.eval_weights if isinstance(w, WeightScheme) else np.asarray(w, dtype=float)
    if not (y.shape == fitted.shape == w.shape):
        raise ValueError("y, fitted and w must have equal lengths")
    return float(np.mean(w * (y - fitted) ** 2))


def werr_f_hat(model: FittedWLS, y, w, tau, sigma2) -> float:
    """Unbiased in-sample risk ``wErrT + (2/n) w_bar sigma2 df_F``."""
    sigma2 = _sigma2(sigma2)
    y = _response(model, y)
    wv = _eval_weights(w, model.n)
    df_f = df_f_linear(model, tau, wv)
    return werr_t(y, model.hat.hat_matrix @ y, wv) + 2.0 / model.n * np.mean(wv) * sigma2 * df_f


def excess_matrix(model: FittedWLS, w) -> np.ndarray:
    """``A = (I - H)^T D (I - H)`` with ``D = diag(w_i / (1 - h_ii)^2 - w_i)``."""
    hat, _ = _split(model)
    wv = _eval_weights(w, hat.n)
    h = check_leverages(hat)
    d = wv / (1.0 - h) ** 2 - wv
    M = np.eye(hat.n) - hat.hat_matrix
    return M.T @ (d[:, None] * M)


def excess_bias_hat(model: FittedWLS, y, w, tau, sigma2) -> tuple[float, float]:
    """Estimate of the out-of-sample minus in-sample squared bias.

    Returns ``(delta, max(delta, 0))`` with
    ``delta = (y^T A y - sigma2 tr(A T)) / n``.
    """
    sigma2 = _sigma2(sigma2)
    y = _response(model, y)
    n = model.n
    tau = _tau(tau, n)
    A = excess_matrix(model, w)
    delta = float(y @ A @ y - sigma2 * np.sum(np.diag(A) * tau)) / n
    return delta, max(delta, 0.0)


def loocv_error(model: FittedWLS, y, w) -> float:
    """Weighted mean of squared leave-one-out residuals (shortcut formula)."""
    y = _response(model, y)
    wv = _eval_weights(w, model.n)
    return float(np.mean(wv * loocv_residuals(model, y) ** 2))


def xi_value(model: FittedWLS, w, tau, df_r) -> float:
    """``xi = 2 w_bar df_R - tr(A T)``."""
    wv = _eval_weights(w, model.n)
    tau = _tau(tau, model.n)
    A = excess_matrix(model, wv)
    df_r = df_r.df_r if isinstance(df_r, DofPair) else float(df_r)
    return float(2.0 * np.mean(wv) * df_r - np.sum(np.diag(A) * tau))


def werr_r_hat(model: FittedWLS, y, w, tau, sigma2, df_r, kfold: float | None = None) -> RiskReport:
    """Adjusted out-of-sample risk ``wErrT + delta_plus + (2/n) w_bar sigma2 df_R``.

    ``df_r`` is a number or a :class:`DofPair` (exact or Monte Carlo).
    """
    sigma2 = _sigma2(sigma2)
    y = _response(model, y)
    n = model.n
    wv = _eval_weights(w, n)
    tau = _tau(tau, n)
    df_r = df_r.df_r if isinstance(df_r, DofPair) else float(df_r)
    w_bar = float(np.mean(wv))
    train = werr_t(y, model.hat.hat_matrix @ y, wv)
    df_f = df_f_linear(model, tau, wv)
    delta, delta_plus = excess_bias_hat(model, y, wv, tau, sigma2)
    penalty = 2.0 / n * w_bar * sigma2 * df_r
    loo = loocv_error(model, y, wv)
    xi = xi_value(model, wv, tau, df_r)
    alt = loo + sigma2 * xi / n
    direct = train + delta + penalty
    agree = abs(alt - direct) <= 1e-9 * max(1.0, abs(direct), abs(loo))
    return RiskReport(
        werr_t=train,
        excess_bias_hat=delta,
        excess_bias_hat_plus=delta_plus,
        df_f=df_f,
        df_r=df_r,
        werr_f_hat=train + 2.0 / n * w_bar * sigma2 * df_f,
        werr_r_hat=train + delta_plus + penalty,
        loocv=loo,
        kfold=kfold,
        xi=xi,
        sigma2=sigma2,
        subset_size=model.p,
        forms_agree=bool(agree),
    )


def kfold_cv_error(data: Dataset, scheme: WeightScheme, subset=None, k: int = 5, seed=0) -> float:
    """Weighted k-fold cross-validation error.

    Folds are contiguous blocks of a seeded permutation of the cases; each
    held-out case contributes ``w_i (y_i - y_hat_i)^2 / n``.

    Raises
    ------
    FoldFailureError
        When a training fold is rank deficient.
    """
    n = data.n
    if not 2 <= k <= n:
        raise ValueError(f"k must lie in [2, n], got {k}")
    cols = list(range(data.m)) if subset is None else [int(j) for j in subset]
    perm = as_rng(seed).permutation(n)
    X = data.design[:, cols]
    y, q, w = data.response, scheme.fit_weights, scheme.eval_weights
    total = 0.0
    for f, held in enumerate(np.array_split(perm, k)):
        train = np.setdiff1d(perm, held, assume_unique=True)
        try:
            model = fit_design(X[train], y[train], q[train])
        except SingularDesignError as exc:
            raise FoldFailureError(f"fold {f} leaves a rank-deficient training design: {exc}", f) from exc
        pred = X[held] @ model.coefficients
        total += float(np.sum(w[held] * (y[held] - pred) ** 2))
    return total / n


def estimate_sigma2(model: FittedWLS, y, w, tau) -> float:
    """Plug-in error variance from weighted residuals (non-canonical helper).

    Divides ``sum w_i r_i^2`` by its expectation per unit ``sigma2``,
    ``sum w_i tau_i - 2 tr(H T W) + tr(H^T W H T)``; with ``q = w = 1/tau``
    the divisor is ``n - p``. Intended for the largest candidate model.
    """
    y = _response(model, y)
    n = model.n
    wv = _eval_weights(w, n)
    tau = _tau(tau, n)
    H = model.hat.hat_matrix
    denom = np.sum(wv * tau) - 2.0 * np.sum(np.diag(H) * tau * wv) + np.sum(wv[:, None] * H**2 * tau[None, :])
    if denom <= 0:
        raise ConfigError("no residual degrees of freedom left to estimate sigma2")
    r = y - H @ y
    return float(np.sum(wv * r**2) / denom)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def oracle_risk(model: FittedWLS, mu_true, tau, sigma2, truth: PopulationTruth, w) -> OracleRisk:
    """Exact risks of ``model`` given the population moments in ``truth``.

    Out of sample: ``sigma2 E(w* tau*) + E[w* (mu* - h*^T mu)^2] + sigma2 E(w* ||h*||_T^2)``.
    In sample the bias is ``||mu - H mu||_W^2 / n``.
    """
    if mu_true is None or truth is None:
        raise ConfigError("oracle risk needs the true mean and population moments")
    sigma2 = _sigma2(sigma2)
    hat, subset = _split(model)
    n = hat.n
    mu = np.asarray(mu_true, dtype=float)
    tau = _tau(tau, n)
    wv = _eval_weights(w, n)
    H = hat.hat_matrix
    idx = list(subset) if subset is not None else list(range(hat.p))
    M = truth.second_moment[np.ix_(idx, idx)]
    # coefficients of the noiseless fit, so that h*^T mu = x*_S^T b
    b = hat.projector_core @ (hat.weighted_design.T @ mu) if hat.p else np.zeros(0)
    irreducible = sigma2 * truth.expected_wtau
    bias = float(truth.mean_square - 2.0 * b @ truth.cross_moment[idx] + b @ M @ b)
    bias = max(bias, 0.0)
    variance = sigma2 * float(np.sum(hat.variance_form(tau) * M)) if hat.p else 0.0
    resid = mu - H @ mu
    in_bias = float(np.mean(wv * resid**2))
    noise = sigma2 * float(np.mean(wv * tau))
    hth = float(np.sum(wv[:, None] * H**2 * tau[None, :])) / n
    trace_htw = float(np.sum(np.diag(H) * tau * wv)) / n
    return OracleRisk(
        werr_r_true=irreducible + bias + variance,
        werr_t_expected=noise + in_bias + sigma2 * (hth - 2.0 * trace_htw),
        excess_bias_true=bias - in_bias,
        irreducible=irreducible,
        bias=bias,
        variance=variance,
        werr_f_true=noise + in_bias + sigma2 * hth,
    )


def loo_residual_variances(model: FittedWLS, tau, sigma2) -> np.ndarray:
    """``Var(y_i - y_hat_i^{-i})`` for each case under the heteroscedastic model."""
    hat, _ = _split(model)
    h = check_leverages(hat)
    M = (np.eye(hat.n) - hat.hat_matrix) / (1.0 - h)[:, None]
    return sigma2 * np.sum(M**2 * _tau(tau, hat.n)[None, :], axis=1)


def xi_components(model: FittedWLS, sigma, tau, w, sigma2) -> dict:
    """The three parts of ``sigma2 xi / n`` read as variance differences.

    ``sigma`` is the normalised moment matrix ``E(w* x x^T) / w_bar`` over the
    fitted columns (or the full design when ``model`` carries its subset).
    The population irreducible term ``E(w* tau*)`` cancels, so only its
    in-sample counterpart is needed.
    """
    sigma2 = _sigma2(sigma2)
    hat, subset = _split(model)
    n = hat.n
    tau = _tau(tau, n)
    wv = _eval_weights(w, n)
    w_bar = float(np.mean(wv))
    S = _restrict_sigma(sigma, hat.p, subset)
    pred_var = sigma2 * w_bar * float(np.sum(hat.variance_form(tau) * S)) if hat.p else 0.0
    loo_var = float(np.mean(wv * loo_residual_variances(model, tau, sigma2)))
    return {
        "new_point_variance": pred_var,
        "loo_variance": loo_var,
        "sample_irreducible": sigma2 * float(np.mean(wv * tau)),
    }


def xi_interpretation_check(model: FittedWLS, sigma, tau, w, sigma2) -> float:
    """Difference between the variance reading of ``sigma2 xi / n`` and its definition.

    Left side: ``E[w* Var(eps_hat*)] - mean_i w_i Var(eps_hat_i^{-i}) -
    sigma2 (E(w* tau*) - mean_i w_i tau_i)``; right side uses
    ``xi = 2 w_bar df_R - tr(A T)``. Analytically zero.
    """
    parts = xi_components(model, sigma, tau, w, sigma2)
    lhs = parts["new_point_variance"] - parts["loo_variance"] + parts["sample_irreducible"]
    df_r = df_r_exact(model, tau, w, sigma).df_r
    rhs = float(sigma2) * xi_value(model, w, tau, df_r) / model.n
    return lhs - rhs


# ---------------------------------------------------------------------------
# curves and selection
# ---------------------------------------------------------------------------


def select_size(sizes, values) -> int:
    """Size minimising ``values``; ties and NaNs resolve toward smaller sizes."""
    sizes = np.asarray(sizes)
    values = np.asarray(values, dtype=float)
    if np.all(np.isnan(values)):
        raise ValueError("no finite criterion values")
    order = np.argsort(sizes, kind="stable")
    v = values[order]
    return int(sizes[order][np.nanargmin(v)])


def risk_curve(
    data: Dataset,
    scheme: WeightScheme,
    sigma2,
    tau=None,
    subsets=None,
    sigma=None,
    df_r_fn=None,
    k: int | None = 5,
    seed=0,
) -> list[dict]:
    """Risk estimates along a nested subset path.

    ``df_R`` comes from ``df_r_fn(model)`` when given, else exactly from the
    full-design moment matrix ``sigma``; without either the curve reports
    ``df_R = df_F`` and ``werr_r_hat`` is omitted.
    """
    tau = data.variance_factors if tau is None else np.asarray(tau, dtype=float)
    if tau is None:
        tau = np.ones(data.n)
    subsets = data.nested_subsets() if subsets is None else subsets
    out = []
    for cols in subsets:
        model = fit(data, scheme, cols)
        kf = kfold_cv_error(data, scheme, cols, k, seed) if k else None
        if df_r_fn is not None:
            dfr = df_r_fn(model)
        elif sigma is not None:
            dfr = df_r_exact(model, tau, scheme, sigma)
        else:
            dfr = None
        rep = werr_r_hat(model, None, scheme, tau, sigma2, dfr if dfr is not None else df_f_linear(model, tau, scheme), kf)
        rec = {
            "p": model.p,
            "werr_t": rep.werr_t,
            "delta_hat": rep.excess_bias_hat,
            "delta_plus": rep.excess_bias_hat_plus,
            "df_f": rep.df_f,
            "df_r": rep.df_r if dfr is not None else float("nan"),
            "werr_f_hat": rep.werr_f_hat,
            "werr_r_hat": rep.werr_r_hat if dfr is not None else float("nan"),
            "loocv": rep.loocv,
            "kfold": float("nan") if kf is None else kf,
            "xi": rep.xi if dfr is not None else float("nan"),
        }
        out.append(rec)
    return out


def write_risk_curve(rows, path):
    write_curve(rows, path, RISK_CURVE_COLUMNS)


def report_dict(report: RiskReport) -> dict:
    return asdict(report)
