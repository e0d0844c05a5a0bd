"""Degrees of freedom and prediction-risk estimation for heteroscedastic weighted least squares."""

from .core import (
    CovariateModel,
    Dataset,
    Schema,
    VarianceModel,
    WeightScheme,
    empirical,
    known_gaussian,
    known_mixture,
    moment_matrix,
    normalize_variance,
    read_csv,
)
from .dof import (
    DofPair,
    IncrementReport,
    df_f_linear,
    df_r_exact,
    df_r_gradient_q,
    df_r_monte_carlo,
    df_r_normal_approx,
    effective_sample_size,
    increment_df,
    weight_path,
    zeta_tau,
)
from .risk import RiskReport, estimate_sigma2, loocv_error, risk_curve, werr_f_hat, werr_r_hat, werr_t
from .wls import FittedWLS, HatOperator, fit, fit_design, hat_vector, loocv_residuals

__version__ = "0.1.0"
