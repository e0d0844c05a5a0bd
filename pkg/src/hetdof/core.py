"""Shared data model: datasets, weight schemes, variance and covariate models.

All containers are frozen after construction; their arrays are copied and
marked read-only so they can be shared freely between threads.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionError,
    EstimationError,
    InvalidVarianceError,
    InvalidWeightsError,
    SchemaMismatchError,
    SingularDesignError,
)

#: Weighted Gram matrices with a larger condition number are treated as singular.
CONDITION_LIMIT = 1e12
#: Default Monte-Carlo size for moment matrices of non-parametric covariate models.
DEFAULT_MC_SIZE = 10_000
MIN_MC_SIZE = 1000


def _readonly(values, ndim=None, name="array"):
    arr = np.array(values, dtype=float, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def as_rng(seed) -> np.random.Generator:
    """Return a numpy Generator for an int seed, a SeedSequence or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def seed_sequence(seed) -> np.random.SeedSequence:
    """Coerce an int (or an existing SeedSequence) into a SeedSequence for spawning."""
    if isinstance(seed, np.random.SeedSequence):
        # fresh copy: spawning advances the original's child counter
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(0, 2**63)))
    return np.random.SeedSequence(seed)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """Design matrix, response and (for simulations) the generating truth.

    Parameters
    ----------
    design : ndarray of shape (n, m)
        Real-valued design; categorical variables already expanded into
        indicator columns.
    response : ndarray of shape (n,)
    true_mean : ndarray of shape (n,), optional
        Conditional mean of the response. Simulation only.
    variance_factors : ndarray of shape (n,), optional
        Relative error variances ``tau_i``; strictly positive.
    noise_scale : float, optional
        Error variance scale ``sigma^2``.
    column_names : tuple of str, optional
    variable_groups : tuple of (str, tuple of int), optional
        Maps each original variable to the design columns encoding it. When
        omitted every column is its own variable.
    """

    design: np.ndarray
    response: np.ndarray
    true_mean: np.ndarray | None = None
    variance_factors: np.ndarray | None = None
    noise_scale: float | None = None
    column_names: tuple | None = None
    variable_groups: tuple | None = None

    def __post_init__(self):
        design = _readonly(self.design, name="design")
        if design.ndim == 1:
            design = _readonly(design.reshape(-1, 1))
        if design.ndim != 2:
            raise DimensionError(f"design must be a matrix, got shape {design.shape}")
        n, m = design.shape
        if n < 1:
            raise DimensionError("dataset needs at least one row")
        if not np.all(np.isfinite(design)):
            raise DimensionError("design contains non-finite entries")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "response", self._vector(self.response, "response", n))
        if self.true_mean is not None:
            object.__setattr__(self, "true_mean", self._vector(self.true_mean, "true_mean", n))
        if self.variance_factors is not None:
            tau = self._vector(self.variance_factors, "variance_factors", n)
            if not np.all(tau > 0) or not np.all(np.isfinite(tau)):
                raise InvalidVarianceError("variance_factors must be strictly positive and finite")
            object.__setattr__(self, "variance_factors", tau)
        if self.noise_scale is not None and not self.noise_scale >= 0:
            raise ValueError("noise_scale must be nonnegative")
        if self.column_names is None:
            object.__setattr__(self, "column_names", tuple(f"x{j + 1}" for j in range(m)))
        else:
            names = tuple(str(c) for c in self.column_names)
            if len(names) != m:
                raise DimensionError(f"{len(names)} column names for {m} columns")
            object.__setattr__(self, "column_names", names)
        if self.variable_groups is None:
            groups = tuple((name, (j,)) for j, name in enumerate(self.column_names))
        else:
            groups = tuple((str(name), tuple(int(j) for j in cols)) for name, cols in self.variable_groups)
            covered = sorted(j for _, cols in groups for j in cols)
            if covered != list(range(m)):
                raise DimensionError("variable_groups must partition the design columns")
        object.__setattr__(self, "variable_groups", groups)

    @staticmethod
    def _vector(values, name, n):
        arr = _readonly(values, ndim=1, name=name)
        if arr.shape[0] != n:
            raise DimensionError(f"{name} has length {arr.shape[0]}, expected {n}")
        return arr

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def m(self) -> int:
        return self.design.shape[1]

    @property
    def variables(self) -> list[str]:
        return [name for name, _ in self.variable_groups]

    def columns_for(self, variables: Sequence) -> list[int]:
        """Design column indices for a sequence of variable names or positions."""
        lookup = dict(self.variable_groups)
        cols = []
        for v in variables:
            if isinstance(v, (int, np.integer)):
                cols.extend(self.variable_groups[int(v)][1])
            elif v in lookup:
                cols.extend(lookup[v])
            else:
                raise SchemaMismatchError(f"unknown variable {v!r}")
        return cols

    def nested_subsets(self, order: Sequence | None = None) -> list[list[int]]:
        """Column subsets obtained by adding variables one at a time.

        Element ``p`` holds the columns of the first ``p`` variables, so the
        list starts with the empty (null) model.
        """
        order = self.variables if order is None else list(order)
        subsets, cols = [[]], []
        for v in order:
            cols = cols + self.columns_for([v])
            subsets.append(list(cols))
        return subsets


# ---------------------------------------------------------------------------
# Weight schemes
# ---------------------------------------------------------------------------


def _positive_weights(values, name):
    arr = _readonly(values, ndim=1, name=name)
    if not np.all(np.isfinite(arr)) or not np.all(arr > 0):
        raise InvalidWeightsError(f"{name} must be strictly positive and finite")
    return arr


@dataclass(frozen=True, eq=False)
class WeightScheme:
    """Per-case fitting weights ``q`` and evaluation weights ``w``."""

    fit_weights: np.ndarray
    eval_weights: np.ndarray
    eval_weight_mean: float = field(init=False)

    def __post_init__(self):
        q = _positive_weights(self.fit_weights, "fit_weights")
        w = _positive_weights(self.eval_weights, "eval_weights")
        if q.shape != w.shape:
            raise DimensionError("fit and evaluation weights differ in length")
        object.__setattr__(self, "fit_weights", q)
        object.__setattr__(self, "eval_weights", w)
        object.__setattr__(self, "eval_weight_mean", float(np.mean(w)))

    @classmethod
    def equal(cls, n: int) -> "WeightScheme":
        ones = np.ones(n)
        return cls(ones, ones)

    @classmethod
    def inverse_tau(cls, tau) -> "WeightScheme":
        """The optimal scheme ``q = w = 1/tau``."""
        inv = 1.0 / np.asarray(tau, dtype=float)
        return cls(inv, inv)

    @classmethod
    def same(cls, weights) -> "WeightScheme":
        return cls(weights, weights)

    @property
    def n(self) -> int:
        return self.eval_weights.shape[0]

    def scaled(self, fit=1.0, evaluation=1.0) -> "WeightScheme":
        return WeightScheme(self.fit_weights * fit, self.eval_weights * evaluation)

    def fit_matches_eval(self, rtol=1e-10) -> bool:
        """True when ``q`` is proportional to ``w``."""
        ratio = self.fit_weights / self.eval_weights
        return bool(np.ptp(ratio) <= rtol * np.max(ratio))


# ---------------------------------------------------------------------------
# Variance models
# ---------------------------------------------------------------------------

VARIANCE_KINDS = ("constant", "tabulated", "power_of_mean", "user_callback")


@dataclass(frozen=True, eq=False)
class VarianceModel:
    """Relative error variance function ``tau``.

    ``kind`` selects the parametrisation:

    ``constant``
        ``params = {"value": c}``.
    ``tabulated``
        ``params = {"values": array}``; one value per row of the evaluated matrix.
    ``power_of_mean``
        ``params = {"coef": beta, "exponent": lam, "scale": b}`` giving
        ``(1 + b |x @ beta|) ** lam``.
    ``user_callback``
        ``params = {"func": f}`` with ``f(rows) -> values``.

    The evaluated function is the raw form divided by ``normalization``.
    """

    kind: str
    params: Mapping = field(default_factory=dict)
    normalization: float = 1.0

    def __post_init__(self):
        if self.kind not in VARIANCE_KINDS:
            raise ValueError(f"unknown variance kind {self.kind!r}")
        params = dict(self.params)
        if self.kind == "tabulated":
            params["values"] = _readonly(params["values"], ndim=1, name="values")
        if self.kind == "power_of_mean":
            params["coef"] = _readonly(np.atleast_1d(params["coef"]), ndim=1, name="coef")
            params.setdefault("scale", 1.0)
        object.__setattr__(self, "params", params)
        if not (np.isfinite(self.normalization) and self.normalization > 0):
            raise InvalidVarianceError("normalization must be positive")

    @classmethod
    def constant(cls, value=1.0):
        return cls("constant", {"value": float(value)})

    @classmethod
    def tabulated(cls, values):
        return cls("tabulated", {"values": values})

    @classmethod
    def power_of_mean(cls, coef, exponent, scale=1.0):
        return cls("power_of_mean", {"coef": coef, "exponent": float(exponent), "scale": float(scale)})

    @classmethod
    def callback(cls, func):
        return cls("user_callback", {"func": func})

    def raw(self, rows=None) -> np.ndarray:
        p = self.params
        if self.kind == "tabulated":
            values = p["values"]
            if rows is not None and len(rows) != len(values):
                raise DimensionError(f"tabulated variance has {len(values)} values for {len(rows)} rows")
            return np.array(values)
        rows = np.asarray(rows, dtype=float)
        if rows.ndim == 1:
            rows = rows.reshape(-1, 1)
        if self.kind == "constant":
            return np.full(rows.shape[0], p["value"])
        if self.kind == "power_of_mean":
            if rows.shape[1] != p["coef"].shape[0]:
                raise DimensionError("coefficient length does not match row width")
            return (1.0 + p["scale"] * np.abs(rows @ p["coef"])) ** p["exponent"]
        return np.asarray(p["func"](rows), dtype=float).reshape(-1)

    def __call__(self, rows=None) -> np.ndarray:
        tau = self.raw(rows) / self.normalization
        if not np.all(np.isfinite(tau)) or not np.all(tau > 0):
            bad = np.flatnonzero(~(np.isfinite(tau) & (tau > 0)))
            raise InvalidVarianceError(f"variance function is not positive on rows {bad[:10].tolist()}")
        return tau


def normalize_variance(model: VarianceModel, reference=None) -> VarianceModel:
    """Rescale ``model`` so that its mean over ``reference`` equals one.

    ``reference`` may be omitted for tabulated models, whose table is the
    reference population.
    """
    if reference is not None and len(reference) == 0:
        raise ValueError("reference sample is empty")
    tau = model(reference)
    if tau.size == 0:
        raise ValueError("reference sample is empty")
    return VarianceModel(model.kind, model.params, model.normalization * float(np.mean(tau)))


# ---------------------------------------------------------------------------
# Covariate models and the moment matrix
# ---------------------------------------------------------------------------

COVARIATE_KINDS = ("known_gaussian", "known_mixture", "empirical", "synthesizer")


@dataclass(frozen=True, eq=False)
class CovariateModel:
    """Distribution of a new covariate row ``x*`` and its evaluation weight ``w*``.

    ``draw(rng, B)`` returns ``(rows, wstar)``. ``weighted_second_moment`` is
    the exact ``E(w* x* x*^T)`` when it is known in closed form.
    """

    kind: str
    n_features: int
    draw: Callable[[np.random.Generator, int], tuple]
    weighted_second_moment: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in COVARIATE_KINDS:
            raise ValueError(f"unknown covariate model kind {self.kind!r}")
        if self.weighted_second_moment is not None:
            object.__setattr__(
                self, "weighted_second_moment", _readonly(self.weighted_second_moment, ndim=2)
            )

    @property
    def sigma_source(self) -> str:
        return "analytic" if self.weighted_second_moment is not None else "monte_carlo"

    def sample(self, B: int, seed=None):
        """Draw ``B`` rows and their evaluation weights."""
        rows, wstar = self.draw(as_rng(seed), int(B))
        rows = np.asarray(rows, dtype=float)
        wstar = np.asarray(wstar, dtype=float).reshape(-1)
        if rows.ndim != 2 or rows.shape[1] != self.n_features:
            raise EstimationError(
                "sampler returned rows of the wrong width",
                {"expected": self.n_features, "shape": rows.shape},
            )
        if wstar.shape[0] != rows.shape[0]:
            raise EstimationError("sampler returned mismatched weights", {"rows": rows.shape[0], "w": wstar.shape[0]})
        return rows, wstar


def _weights_for(rows, weight_fn):
    if weight_fn is None:
        return np.ones(rows.shape[0])
    return np.asarray(weight_fn(rows), dtype=float).reshape(-1)


def known_gaussian(mean, cov, weight_fn=None, weight_sampler=None, expected_weight=None) -> CovariateModel:
    """Multivariate normal covariates.

    Evaluation weights are ``weight_fn(rows)`` when they depend on ``x*``,
    otherwise drawn independently by ``weight_sampler(rng, B)``; with neither,
    ``w* = 1``. The moment matrix is analytic unless ``weight_fn`` is given
    or the mean of an independent weight is unknown.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    m = mean.shape[0]
    if cov.shape != (m, m):
        raise DimensionError("covariance shape does not match mean")
    chol = np.linalg.cholesky(cov)

    def draw(rng, B):
        rows = mean + rng.standard_normal((B, m)) @ chol.T
        if weight_fn is not None:
            return rows, _weights_for(rows, weight_fn)
        if weight_sampler is not None:
            return rows, np.asarray(weight_sampler(rng, B), dtype=float)
        return rows, np.full(B, 1.0 if expected_weight is None else float(expected_weight))

    exact = None
    if weight_fn is None:
        ew = 1.0 if (weight_sampler is None and expected_weight is None) else expected_weight
        if ew is not None:
            exact = float(ew) * (cov + np.outer(mean, mean))
    return CovariateModel("known_gaussian", m, draw, exact)


def known_mixture(proportions, means, covs, weight_fn=None) -> CovariateModel:
    """Finite mixture of multivariate normals."""
    proportions = np.asarray(proportions, dtype=float)
    means = [np.atleast_1d(np.asarray(mu, dtype=float)) for mu in means]
    covs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in covs]
    m = means[0].shape[0]
    chols = [np.linalg.cholesky(c) for c in covs]

    def draw(rng, B):
        comp = rng.choice(len(proportions), size=B, p=proportions)
        z = rng.standard_normal((B, m))
        rows = np.empty((B, m))
        for k, (mu, L) in enumerate(zip(means, chols)):
            sel = comp == k
            rows[sel] = mu + z[sel] @ L.T
        return rows, _weights_for(rows, weight_fn)

    exact = None
    if weight_fn is None:
        exact = sum(pk * (c + np.outer(mu, mu)) for pk, mu, c in zip(proportions, means, covs))
    return CovariateModel("known_mixture", m, draw, exact)


def empirical(rows, weights=None) -> CovariateModel:
    """Resampling distribution over fixed rows, each carrying its own weight."""
    rows = np.array(rows, dtype=float)
    n = rows.shape[0]
    wts = np.ones(n) if weights is None else np.array(weights, dtype=float)
    if wts.shape != (n,):
        raise DimensionError("one weight per row required")

    def draw(rng, B):
        idx = rng.integers(0, n, size=B)
        return rows[idx], wts[idx]

    exact = (rows * wts[:, None]).T @ rows / n
    return CovariateModel("empirical", rows.shape[1], draw, exact)


def synthesizer(sample_fn, n_features, weight_fn=None) -> CovariateModel:
    """Wrap a learned synthesizer ``sample_fn(B, rng) -> rows``."""

    def draw(rng, B):
        rows = np.asarray(sample_fn(B, rng), dtype=float)
        return rows, _weights_for(rows, weight_fn)

    return CovariateModel("synthesizer", int(n_features), draw, None)


def moment_matrix(cov: CovariateModel, weights: WeightScheme, source=None, B=None, seed=0, return_se=False):
    """``Sigma = E(w* x* x*^T) / w_bar`` for the covariate model ``cov``.

    Parameters
    ----------
    source : {"analytic", "monte_carlo"}, optional
        Defaults to analytic when the model provides the exact moment.
    B : int, optional
        Monte-Carlo size, at least 1000 (default 10000).
    return_se : bool
        Also return the entrywise Monte-Carlo standard error (zeros when
        analytic).
    """
    w_bar = weights.eval_weight_mean
    source = source or cov.sigma_source
    m = cov.n_features
    if source == "analytic":
        if cov.weighted_second_moment is None:
            raise EstimationError("no analytic moment for this covariate model", {"kind": cov.kind})
        sigma = np.array(cov.weighted_second_moment) / w_bar
        sigma = 0.5 * (sigma + sigma.T)
        return (sigma, np.zeros((m, m))) if return_se else sigma
    if source != "monte_carlo":
        raise ValueError(f"unknown moment source {source!r}")
    B = DEFAULT_MC_SIZE if B is None else int(B)
    if B < MIN_MC_SIZE:
        raise EstimationError(f"Monte-Carlo size {B} below minimum {MIN_MC_SIZE}", {"B": B})
    rows, wstar = cov.sample(B, seed)
    if not (np.all(np.isfinite(rows)) and np.all(np.isfinite(wstar))):
        raise EstimationError("non-finite covariate samples", {"B": B})
    if np.linalg.matrix_rank(rows) < min(m, B):
        raise EstimationError(
            "degenerate covariate samples", {"rank": int(np.linalg.matrix_rank(rows)), "m": m}
        )
    sigma = (rows * wstar[:, None]).T @ rows / (B * w_bar)
    sigma = 0.5 * (sigma + sigma.T)
    if not return_se:
        return sigma
    terms = wstar[:, None, None] * rows[:, :, None] * rows[:, None, :] / w_bar
    se = terms.std(axis=0, ddof=1) / math.sqrt(B)
    return sigma, se


# ---------------------------------------------------------------------------
# Rank checks
# ---------------------------------------------------------------------------


def check_full_rank(design, fit_weights, column_names=None, limit=CONDITION_LIMIT) -> float:
    """Raise :class:`SingularDesignError` when ``X^T Q X`` is ill conditioned.

    Returns the condition number of the weighted Gram matrix.
    """
    X = np.asarray(design, dtype=float)
    p = X.shape[1]
    if p == 0:
        return 1.0
    names = list(column_names) if column_names is not None else list(range(p))
    if X.shape[0] < p:
        raise SingularDesignError(f"{p} columns but only {X.shape[0]} rows", names, float("inf"))
    Xs = X * np.sqrt(np.asarray(fit_weights, dtype=float))[:, None]
    sv = np.linalg.svd(Xs, compute_uv=False)
    cond = float((sv[0] / sv[-1]) ** 2) if sv[-1] > 0 else float("inf")
    if cond > limit:
        from scipy.linalg import qr

        _, r, piv = qr(Xs, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = diag[0] / math.sqrt(limit)
        offending = [names[j] for j, d in zip(piv, diag) if d <= tol] or [names[piv[-1]]]
        raise SingularDesignError(
            f"weighted design is rank deficient (condition {cond:.3g}); dependent columns: {offending}",
            offending,
            cond,
        )
    return cond


# ---------------------------------------------------------------------------
# Schema-driven ingestion
# ---------------------------------------------------------------------------

COLUMN_KINDS = ("numeric", "categorical", "response", "variance", "derived")

TRANSFORMS = {
    "square": np.square,
    "sqrt": np.sqrt,
    "log": np.log,
    "log1p": np.log1p,
    "exp": np.exp,
    "abs": np.abs,
    "logit": lambda v: np.log(v / (1.0 - v)),
}


@dataclass(frozen=True)
class ColumnSpec:
    """One schema entry.

    ``derived`` columns are deterministic transforms of a numeric ``parent``
    and are recomputed rather than synthesized.
    """

    name: str
    kind: str
    levels: tuple = ()
    coding: str = "dummy"
    parent: str | None = None
    transform: str | None = None

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise SchemaMismatchError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if len(self.levels) < 2:
                raise SchemaMismatchError(f"categorical column {self.name!r} needs at least two levels")
            if self.coding not in ("dummy", "sign"):
                raise SchemaMismatchError(f"column {self.name!r}: unknown coding {self.coding!r}")
            if self.coding == "sign" and len(self.levels) != 2:
                raise SchemaMismatchError(f"sign coding needs exactly two levels ({self.name!r})")
        if self.kind == "derived" and (self.parent is None or self.transform not in TRANSFORMS):
            raise SchemaMismatchError(f"derived column {self.name!r} needs a parent and a known transform")

    @property
    def encoded_names(self) -> list[str]:
        if self.kind == "categorical":
            if self.coding == "sign":
                return [self.name]
            return [f"{self.name}={lvl}" for lvl in self.levels[1:]]
        return [self.name]


@dataclass(frozen=True)
class Schema:
    columns: tuple

    @classmethod
    def from_dict(cls, spec: Mapping) -> "Schema":
        entries = spec["columns"] if isinstance(spec, Mapping) else spec
        cols = []
        for e in entries:
            cols.append(
                ColumnSpec(
                    name=str(e["name"]),
                    kind=str(e.get("type", e.get("kind", "numeric"))),
                    levels=tuple(str(v) for v in e.get("levels", ())),
                    coding=str(e.get("coding", "dummy")),
                    parent=e.get("parent"),
                    transform=e.get("transform"),
                )
            )
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise SchemaMismatchError("duplicate column names in schema")
        if sum(c.kind == "response" for c in cols) > 1:
            raise SchemaMismatchError("schema declares more than one response")
        return cls(tuple(cols))

    @classmethod
    def from_json(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = []
        for c in self.columns:
            e = {"name": c.name, "type": c.kind}
            if c.kind == "categorical":
                e.update(levels=list(c.levels), coding=c.coding)
            if c.kind == "derived":
                e.update(parent=c.parent, transform=c.transform)
            out.append(e)
        return {"columns": out}

    @property
    def predictors(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind in ("numeric", "categorical", "derived")]

    def column(self, name) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaMismatchError(f"schema has no column {name!r}")


def _is_missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, str):
        return v.strip() == "" or v.strip().lower() in ("na", "nan")
    return isinstance(v, float) and math.isnan(v)


def _numeric(values, name):
    out = np.empty(len(values))
    for i, v in enumerate(values):
        if _is_missing(v):
            raise SchemaMismatchError(f"missing value in column {name!r} at row {i + 1}")
        try:
            out[i] = float(v)
        except (TypeError, ValueError):
            raise SchemaMismatchError(f"non-numeric value {v!r} in column {name!r} at row {i + 1}") from None
    if not np.all(np.isfinite(out)):
        raise SchemaMismatchError(f"non-finite value in column {name!r}")
    return out


def _level_key(v) -> str:
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return str(v).strip()


def encode_categoricals(raw_table: Mapping, schema: Schema | Mapping) -> Dataset:
    """Build a :class:`Dataset` from named raw columns.

    Numeric columns pass through, a categorical column with ``L`` levels
    becomes ``L - 1`` indicator columns (first level is the reference) or one
    ``+/-1`` column under ``coding="sign"``, and derived columns are computed
    from their parent.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_dict(schema)
    missing = [c.name for c in schema.columns if c.kind != "derived" and c.name not in raw_table]
    if missing:
        raise SchemaMismatchError(f"table lacks schema columns {missing}")
    lengths = {len(raw_table[c.name]) for c in schema.columns if c.kind != "derived"}
    if len(lengths) != 1:
        raise SchemaMismatchError("columns have different lengths")
    (n,) = lengths

    blocks, names, groups = [], [], []
    numeric_cache = {}
    response = tau = None
    col = 0
    for spec in schema.columns:
        if spec.kind == "response":
            response = _numeric(raw_table[spec.name], spec.name)
            continue
        if spec.kind == "variance":
            tau = _numeric(raw_table[spec.name], spec.name)
            continue
        if spec.kind == "numeric":
            block = _numeric(raw_table[spec.name], spec.name)[:, None]
            numeric_cache[spec.name] = block[:, 0]
        elif spec.kind == "derived":
            parent = numeric_cache.get(spec.parent)
            if parent is None:
                raise SchemaMismatchError(f"derived column {spec.name!r} must follow numeric parent {spec.parent!r}")
            with np.errstate(all="ignore"):
                block = TRANSFORMS[spec.transform](parent)[:, None]
            if not np.all(np.isfinite(block)):
                raise SchemaMismatchError(f"transform {spec.transform!r} of {spec.parent!r} is not finite")
        else:
            keys = [_level_key(v) if not _is_missing(v) else None for v in raw_table[spec.name]]
            index = {lvl: k for k, lvl in enumerate(spec.levels)}
            codes = np.empty(n, dtype=int)
            for i, key in enumerate(keys):
                if key is None:
                    raise SchemaMismatchError(f"missing value in column {spec.name!r} at row {i + 1}")
                if key not in index:
                    raise SchemaMismatchError(f"unseen level {key!r} in column {spec.name!r}")
                codes[i] = index[key]
            if spec.coding == "sign":
                block = np.where(codes == 1, 1.0, -1.0)[:, None]
            else:
                block = (codes[:, None] == np.arange(1, len(spec.levels))[None, :]).astype(float)
        width = block.shape[1]
        blocks.append(block)
        names.extend(spec.encoded_names)
        groups.append((spec.name, tuple(range(col, col + width))))
        col += width
    if response is None:
        raise SchemaMismatchError("schema declares no response column")
    design = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return Dataset(design, response, variance_factors=tau, column_names=tuple(names), variable_groups=tuple(groups))


def read_table(path) -> dict:
    """Read a headed CSV file into ``{column: list of str}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatchError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise SchemaMismatchError(f"{path}: duplicate header names")
        table = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaMismatchError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for h, v in zip(header, row):
                table[h].append(v)
    return table


def read_csv(path, schema: Schema | Mapping | str | Path) -> Dataset:
    """Load a headed CSV through a schema (a :class:`Schema`, dict or JSON path)."""
    if isinstance(schema, (str, Path)):
        schema = Schema.from_json(schema)
    return encode_categoricals(read_table(path), schema)
