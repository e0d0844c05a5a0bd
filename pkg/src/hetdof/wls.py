"""Weighted least squares fits, hat operators and the leave-one-out shortcut."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import qr, solve_triangular

from .core import Dataset, WeightScheme, check_full_rank
from .errors import DegenerateLeverageError, DimensionError

#: Leverages at or above ``1 - LEVERAGE_SLACK`` make a case self-determining.
LEVERAGE_SLACK = 1e-10


@dataclass(frozen=True, eq=False)
class HatOperator:
    """Hat matrix ``H = X (X^T Q X)^{-1} X^T Q`` with its factored form.

    ``projector_core`` is the ``p x p`` inverse Gram matrix, which together
    with ``design`` and ``fit_weights`` evaluates hat vectors at new points
    without touching ``hat_matrix``.
    """

    hat_matrix: np.ndarray
    projector_core: np.ndarray
    fit_weights: np.ndarray
    design: np.ndarray

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @property
    def leverages(self) -> np.ndarray:
        return np.diag(self.hat_matrix).copy()

    @property
    def weighted_design(self) -> np.ndarray:
        """``Q X``, the left factor of every hat vector."""
        return self.design * self.fit_weights[:, None]

    def vectors(self, rows) -> np.ndarray:
        """Hat vectors at each row of ``rows``; shape ``(B, n)``."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != self.p:
            raise DimensionError(f"new points have {rows.shape[1]} columns, model has {self.p}")
        return rows @ self.projector_core @ self.weighted_design.T

    def variance_form(self, tau) -> np.ndarray:
        """``G = (X^T Q X)^{-1} X^T Q T Q X (X^T Q X)^{-1}`` so that ``||h*||_T^2 = x*^T G x*``."""
        qx = self.weighted_design
        mid = (qx * np.asarray(tau, dtype=float)[:, None]).T @ qx
        g = self.projector_core @ mid @ self.projector_core
        return 0.5 * (g + g.T)


@dataclass(frozen=True, eq=False)
class FittedWLS:
    coefficients: np.ndarray
    hat: HatOperator
    fitted: np.ndarray
    residuals: np.ndarray
    column_subset: tuple

    @property
    def p(self) -> int:
        return self.hat.p

    @property
    def n(self) -> int:
        return self.hat.n

    def predict(self, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != self.p:
            raise DimensionError(f"rows have {rows.shape[1]} columns, model has {self.p}")
        return rows @ self.coefficients


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def fit_design(X, y, q, column_names=None, column_subset=None) -> FittedWLS:
    """Weighted least squares on an explicit design matrix.

    The fit uses a QR factorisation of ``sqrt(q) X``; rank is checked first
    through the condition number of ``X^T Q X``.
    """
    X = np.array(X, dtype=float, ndmin=2)
    y = np.asarray(y, dtype=float)
    q = np.asarray(q, dtype=float)
    n, p = X.shape
    if y.shape != (n,) or q.shape != (n,):
        raise DimensionError("response and weights must have one entry per row")
    if column_subset is None:
        column_subset = tuple(range(p))
    if p == 0:
        hat = HatOperator(np.zeros((n, n)), np.zeros((0, 0)), q.copy(), X.copy())
        fitted = np.zeros(n)
        coef = np.zeros(0)
        resid = y.copy()
    else:
        check_full_rank(X, q, column_names)
        sq = np.sqrt(q)
        _, r = qr(X * sq[:, None], mode="economic")
        r_inv = solve_triangular(r, np.eye(p))
        core = r_inv @ r_inv.T
        core = 0.5 * (core + core.T)
        qx = X * q[:, None]
        coef = core @ (qx.T @ y)
        H = X @ (core @ qx.T)
        hat = HatOperator(H, core, q.copy(), X.copy())
        fitted = H @ y
        resid = y - fitted
    _freeze(hat.hat_matrix, hat.projector_core, hat.fit_weights, hat.design, coef, fitted, resid)
    return FittedWLS(coef, hat, fitted, resid, tuple(int(j) for j in column_subset))


def fit(data: Dataset, scheme: WeightScheme, subset: Sequence[int] | None = None) -> FittedWLS:
    """Fit ``y`` on the chosen design columns with fitting weights ``scheme.fit_weights``.

    Raises
    ------
    SingularDesignError
        If the weighted design restricted to ``subset`` is rank deficient;
        the error names the dependent columns.
    """
    cols = list(range(data.m)) if subset is None else [int(j) for j in subset]
    if scheme.n != data.n:
        raise DimensionError(f"weight scheme has {scheme.n} cases, dataset has {data.n}")
    names = [data.column_names[j] for j in cols]
    return fit_design(data.design[:, cols], data.response, scheme.fit_weights, names, cols)


def hat_vector(model: FittedWLS, x_new) -> np.ndarray:
    """Hat vector ``h* = Q X (X^T Q X)^{-1} x*``, so the prediction is ``h* @ y``."""
    x_new = np.asarray(x_new, dtype=float).reshape(-1)
    if x_new.shape[0] != model.p:
        raise DimensionError(f"x_new has {x_new.shape[0]} entries, model has {model.p} columns")
    return model.hat.vectors(x_new[None, :])[0]


def check_leverages(hat: HatOperator) -> np.ndarray:
    h = hat.leverages
    bad = np.flatnonzero(h >= 1.0 - LEVERAGE_SLACK)
    if bad.size:
        raise DegenerateLeverageError(
            f"cases {bad[:10].tolist()} have leverage at or above one; leave-one-out fit undefined",
            bad.tolist(),
        )
    return h


def loocv_residuals(model: FittedWLS, y=None) -> np.ndarray:
    """Leave-one-out residuals ``(y_i - h_i^T y) / (1 - h_ii)`` without refitting."""
    H = model.hat.hat_matrix
    h = check_leverages(model.hat)
    y = model.fitted + model.residuals if y is None else np.asarray(y, dtype=float)
    return (y - H @ y) / (1.0 - h)
