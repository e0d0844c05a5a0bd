"""Covariate synthesizers for Monte-Carlo estimation of predictive degrees of freedom.

Two generators are provided:

* a naive-Bayes mixture (NBE): a latent class ``Z`` with conditionally
  independent features, Gaussian for continuous and multinomial for
  categorical columns, fitted by EM;
* a sequential tree synthesizer (CART): each variable is drawn from the
  training values in the leaf reached by the partially synthesized row.

Both operate on encoded numeric rows. A column is categorical when listed in
``categorical``; when that argument is omitted, columns with at most two
distinct values are treated as categorical.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import TRANSFORMS, as_rng, seed_sequence
from .dof import DofPair, dfr_from_rows
from .errors import FitError, SchemaMismatchError
from .wls import FittedWLS, fit_design


def _categorical_columns(rows, categorical):
    if categorical is None:
        return [j for j in range(rows.shape[1]) if np.unique(rows[:, j]).size <= 2]
    cats = sorted({int(j) for j in categorical})
    if cats and (cats[0] < 0 or cats[-1] >= rows.shape[1]):
        raise SchemaMismatchError(f"categorical column index out of range: {cats}")
    return cats


def _rows(rows):
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise SchemaMismatchError(f"rows must be a non-empty matrix, got shape {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise SchemaMismatchError("rows contain non-finite values")
    return rows


# ---------------------------------------------------------------------------
# naive-Bayes mixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tolerance: float = 1e-8
    n_restarts: int = 5
    variance_floor: float = 1e-6
    kmeans_iter: int = 10


@dataclass(frozen=True, eq=False)
class NbeModel:
    """Fitted naive-Bayes mixture.

    ``variances`` are per component and continuous feature;
    ``level_probs[j]`` is a ``(K, L_j)`` array for the ``j``-th categorical
    column with level values ``levels[j]``. ``em_trace`` holds the total
    log-likelihood after each E-step.
    """

    n_components: int
    mixing_weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    level_probs: tuple
    levels: tuple
    continuous: tuple
    categorical: tuple
    n_features: int
    em_trace: np.ndarray
    variance_floor: np.ndarray = field(default=None)

    def component_log_density(self, rows) -> np.ndarray:
        """``log p(x | Z = k)`` for every row and component, shape ``(B, K)``."""
        rows = _rows(rows)
        out = np.zeros((rows.shape[0], self.n_components))
        if self.continuous:
            xc = rows[:, list(self.continuous)]
            for k in range(self.n_components):
                v = self.variances[k]
                out[:, k] -= 0.5 * np.sum(np.log(2 * np.pi * v) + (xc - self.means[k]) ** 2 / v, axis=1)
        for j, col in enumerate(self.categorical):
            codes = _codes(rows[:, col], self.levels[j])
            with np.errstate(divide="ignore"):
                logp = np.log(self.level_probs[j])
            valid = codes >= 0
            out[valid] += logp[:, codes[valid]].T
            out[~valid] = -np.inf
        return out

    def log_likelihood(self, rows) -> float:
        dens = self.component_log_density(rows) + np.log(self.mixing_weights)
        return float(np.sum(logsumexp(dens, axis=1)))

    def responsibilities(self, rows) -> np.ndarray:
        dens = self.component_log_density(rows) + np.log(self.mixing_weights)
        return np.exp(dens - logsumexp(dens, axis=1, keepdims=True))

    def sample(self, B: int, seed=None) -> np.ndarray:
        return nbe_sample(self, B, seed)


def _codes(values, levels):
    idx = np.searchsorted(levels, values)
    idx = np.clip(idx, 0, len(levels) - 1)
    return np.where(levels[idx] == values, idx, -1)


def _kmeans_labels(xc, K, rng, n_iter):
    """Lloyd iterations from k-means++ seeds on standardised columns."""
    n = xc.shape[0]
    sd = xc.std(axis=0)
    z = (xc - xc.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    centers = [z[rng.integers(n)]]
    for _ in range(1, K):
        d2 = np.min([np.sum((z - c) ** 2, axis=1) for c in centers], axis=0)
        prob = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers.append(z[rng.choice(n, p=prob)])
    centers = np.array(centers)
    labels = np.zeros(n, dtype=int)
    for _ in range(n_iter):
        labels = np.argmin(((z[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        for k in range(K):
            if np.any(labels == k):
                centers[k] = z[labels == k].mean(axis=0)
    return labels


def _m_step(resp, xc, codes, n_levels, floor):
    nk = resp.sum(axis=0)
    if np.any(nk < 1e-8):
        return None
    pi = nk / nk.sum()
    means = resp.T @ xc / nk[:, None]
    second = resp.T @ xc**2 / nk[:, None]
    variances = np.maximum(second - means**2, floor[None, :])
    probs = []
    for j, L in enumerate(n_levels):
        onehot = np.eye(L)[codes[:, j]]
        probs.append(resp.T @ onehot / nk[:, None])
    return pi, means, variances, probs


def _e_step(pi, means, variances, probs, xc, codes):
    n, K = xc.shape[0], pi.shape[0]
    logd = np.tile(np.log(pi), (n, 1))
    if xc.shape[1]:
        for k in range(K):
            logd[:, k] -= 0.5 * np.sum(np.log(2 * np.pi * variances[k]) + (xc - means[k]) ** 2 / variances[k], axis=1)
    with np.errstate(divide="ignore"):
        for j, P in enumerate(probs):
            logd += np.log(P[:, codes[:, j]]).T
    norm = logsumexp(logd, axis=1)
    return np.exp(logd - norm[:, None]), float(norm.sum())


def nbe_fit(rows, categorical=None, K: int = 2, em_config: EmConfig | None = None, seed=0) -> NbeModel:
    """Fit a naive-Bayes mixture by EM, keeping the best of several restarts.

    Raises
    ------
    FitError
        When every restart ends with an empty component.
    """
    cfg = em_config or EmConfig()
    rows = _rows(rows)
    n, m = rows.shape
    if K < 1 or n < K:
        raise FitError(f"need 1 <= K <= n (K={K}, n={n})")
    cats = _categorical_columns(rows, categorical)
    conts = [j for j in range(m) if j not in cats]
    xc = rows[:, conts]
    levels = tuple(np.unique(rows[:, j]) for j in cats)
    codes = np.column_stack([_codes(rows[:, j], lv) for j, lv in zip(cats, levels)]) if cats else np.zeros((n, 0), int)
    n_levels = [len(lv) for lv in levels]
    feat_var = xc.var(axis=0) if conts else np.zeros(0)
    floor = cfg.variance_floor * np.where(feat_var > 0, feat_var, 1.0)

    best = None
    seeds = seed_sequence(seed).spawn(cfg.n_restarts)
    for ss in seeds:
        rng = np.random.default_rng(ss)
        if K == 1:
            resp = np.ones((n, 1))
        elif conts:
            labels = _kmeans_labels(xc, K, rng, cfg.kmeans_iter)
            resp = 0.9 * np.eye(K)[labels] + 0.1 / K
        else:
            resp = rng.dirichlet(np.ones(K), size=n)
        trace = []
        params = None
        for _ in range(cfg.max_iter):
            params = _m_step(resp, xc, codes, n_levels, floor)
            if params is None:
                break
            resp, ll = _e_step(*params, xc, codes)
            trace.append(ll)
            if len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.tolerance * max(1.0, abs(trace[-1])):
                break
        if params is None:
            continue
        if best is None or trace[-1] > best[1][-1]:
            best = (params, trace)
    if best is None:
        raise FitError(f"all {cfg.n_restarts} EM restarts produced an empty component")
    (pi, means, variances, probs), trace = best
    return NbeModel(
        n_components=K,
        mixing_weights=pi,
        means=means,
        variances=variances,
        level_probs=tuple(probs),
        levels=levels,
        continuous=tuple(conts),
        categorical=tuple(cats),
        n_features=m,
        em_trace=np.array(trace),
        variance_floor=floor,
    )


def nbe_select_k(rows, categorical=None, ks=range(1, 6), holdout: float = 0.25, em_config=None, seed=0) -> int:
    """Choose ``K`` by held-out log-likelihood (optional; the default is ``K = 2``)."""
    rows = _rows(rows)
    rng = as_rng(seed)
    perm = rng.permutation(rows.shape[0])
    n_test = max(1, int(round(holdout * rows.shape[0])))
    test, train = rows[perm[:n_test]], rows[perm[n_test:]]
    cats = _categorical_columns(rows, categorical)
    scores = {}
    for K in ks:
        try:
            model = nbe_fit(train, cats, K, em_config, seed)
        except FitError:
            continue
        scores[K] = model.log_likelihood(test)
    if not scores:
        raise FitError("no candidate K could be fitted")
    return max(scores, key=lambda k: (scores[k], -k))


def nbe_sample(model: NbeModel, B: int, seed=None) -> np.ndarray:
    """Draw ``B`` rows: a component first, then every feature independently."""
    rng = as_rng(seed)
    comp = rng.choice(model.n_components, size=B, p=model.mixing_weights)
    out = np.empty((B, model.n_features))
    if model.continuous:
        z = rng.standard_normal((B, len(model.continuous)))
        out[:, list(model.continuous)] = model.means[comp] + np.sqrt(model.variances[comp]) * z
    for j, col in enumerate(model.categorical):
        cum = np.cumsum(model.level_probs[j], axis=1)[comp]
        u = rng.random(B)[:, None]
        idx = np.minimum((u > cum).sum(axis=1), len(model.levels[j]) - 1)
        out[:, col] = model.levels[j][idx]
    return out


# ---------------------------------------------------------------------------
# sequential trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CartSynthesizer:
    """Sequential tree synthesizer.

    ``steps`` lists ``(column, conditioning columns, tree, leaf values)`` in
    synthesis order; the first step has no tree and bootstraps the marginal.
    ``derived`` maps a column to ``(parent, transform name)``.
    """

    variable_order: tuple
    steps: tuple
    derived: dict
    n_features: int
    min_leaf: int

    def sample(self, B: int, seed=None) -> np.ndarray:
        return cart_sample(self, B, seed)


def cart_fit(
    rows,
    categorical=None,
    order=None,
    min_leaf: int = 5,
    max_depth: int | None = None,
    seed=0,
    derived: dict | None = None,
) -> CartSynthesizer:
    """Fit one tree per variable on the variables synthesized before it.

    Continuous targets use variance-reduction regression trees, categorical
    ones Gini classification trees. ``derived`` columns are never modelled;
    they are recomputed from their parent at sampling time.
    """
    from sklearn.tree import DecisionTreeClassifier, DecisionTreeRegressor

    if min_leaf < 5:
        raise ValueError(f"min_leaf must be at least 5, got {min_leaf}")
    rows = _rows(rows)
    n, m = rows.shape
    derived = {int(k): (int(v[0]), str(v[1])) for k, v in (derived or {}).items()}
    for col, (parent, name) in derived.items():
        if name not in TRANSFORMS or not 0 <= parent < m or parent in derived:
            raise SchemaMismatchError(f"invalid derived column {col}: parent {parent}, transform {name!r}")
    order = list(range(m)) if order is None else [int(j) for j in order]
    if sorted(order) != list(range(m)):
        raise SchemaMismatchError("order must be a permutation of the columns")
    cats = set(_categorical_columns(rows, categorical))
    rs = int(seed_sequence(seed).generate_state(1)[0])
    children = {}
    for col, (parent, _) in derived.items():
        children.setdefault(parent, []).append(col)

    available, steps = [], []
    for col in order:
        if col in derived:
            continue
        target = rows[:, col]
        if not available:
            steps.append((col, (), None, {-1: target.copy()}))
        else:
            cls = DecisionTreeClassifier if col in cats else DecisionTreeRegressor
            tree = cls(min_samples_leaf=min_leaf, max_depth=max_depth, random_state=rs)
            Xc = rows[:, available]
            tree.fit(Xc, target)
            leaf = tree.apply(Xc)
            values = {int(l): target[leaf == l].copy() for l in np.unique(leaf)}
            steps.append((col, tuple(available), tree, values))
        available.append(col)
        available.extend(sorted(children.get(col, [])))
    return CartSynthesizer(tuple(order), tuple(steps), derived, m, min_leaf)


def cart_sample(synth: CartSynthesizer, B: int, seed=None) -> np.ndarray:
    """Route partial rows through each tree and draw uniformly from the reached leaf."""
    rng = as_rng(seed)
    out = np.full((B, synth.n_features), np.nan)

    def fill_children(parent):
        for col, (par, name) in synth.derived.items():
            if par == parent:
                out[:, col] = TRANSFORMS[name](out[:, parent])

    for col, cond, tree, values in synth.steps:
        if tree is None:
            pool = values[-1]
            out[:, col] = pool[rng.integers(0, pool.size, size=B)]
        else:
            leaf = tree.apply(out[:, list(cond)])
            for l in np.unique(leaf):
                sel = np.flatnonzero(leaf == l)
                pool = values[int(l)]
                out[sel, col] = pool[rng.integers(0, pool.size, size=sel.size)]
        fill_children(col)
    return out


# ---------------------------------------------------------------------------
# estimators built on synthetic rows
# ---------------------------------------------------------------------------


def dfr_from_synthetic(model: FittedWLS, tau, w, synthetic_rows, synthetic_weights=None) -> DofPair:
    """Monte-Carlo ``df_R`` with synthetic covariates standing in for new points.

    ``synthetic_weights`` are the evaluation weights ``w*`` of the synthetic
    rows: an array, a callable on the rows, or ``None`` for unit weights.
    Rows may span the full design; they are restricted to the model columns.
    """
    rows = _rows(synthetic_rows)
    if synthetic_weights is None:
        wstar = np.ones(rows.shape[0])
    elif callable(synthetic_weights):
        wstar = np.asarray(synthetic_weights(rows), dtype=float)
    else:
        wstar = np.asarray(synthetic_weights, dtype=float)
    return dfr_from_rows(model, tau, w, rows, wstar)


def _synthesize(rows, method, B, seed, categorical=None):
    ss = seed_sequence(seed).spawn(2)
    if method == "nbe":
        return nbe_sample(nbe_fit(rows, categorical, seed=ss[0]), B, ss[1])
    if method == "cart":
        return cart_sample(cart_fit(rows, categorical, seed=ss[0]), B, ss[1])
    raise ValueError(f"unknown synthesis method {method!r}")


def synthesize(rows, method: str = "nbe", B: int = 1000, seed=0, categorical=None) -> np.ndarray:
    """Fit ``method`` (``"nbe"`` or ``"cart"``) on ``rows`` and draw ``B`` synthetic rows."""
    return _synthesize(_rows(rows), method, B, seed, categorical)


@dataclass(frozen=True)
class JointDemoReport:
    method: str
    estimates: tuple
    mean: float
    sd: float
    truth: float
    note: str = "not for risk estimation"


def joint_synthesis_demo(rows_with_response, method: str = "cart", B: int = 10_000, seed=0, repeats: int = 1) -> JointDemoReport:
    """Direct out-of-sample error from jointly synthesized ``(x, y)`` pairs.

    The last column is the response. An intercept-free OLS fit on the
    original rows is scored on synthetic pairs; synthesis bias inflates the
    result far above the true risk, so the estimate is reported for
    illustration only. ``truth`` is ``1 + tr[(X^T X)^{-1}]``, the exact risk
    when the true model is linear with unit noise and ``E(x x^T) = I``.
    """
    data = _rows(rows_with_response)
    X, y = data[:, :-1], data[:, -1]
    model = fit_design(X, y, np.ones(X.shape[0]))
    truth = 1.0 + float(np.trace(np.linalg.inv(X.T @ X)))
    estimates = []
    for ss in seed_sequence(seed).spawn(repeats):
        synth = _synthesize(data, method, B, ss, categorical=[])
        estimates.append(float(np.mean((synth[:, -1] - synth[:, :-1] @ model.coefficients) ** 2)))
    est = np.array(estimates)
    sd = float(est.std(ddof=1)) if repeats > 1 else float("nan")
    return JointDemoReport(method, tuple(estimates), float(est.mean()), sd, truth)


def demo_rows(n: int = 200, d: int = 5, seed=0) -> np.ndarray:
    """Rows ``(x_1..x_d, y)`` with i.i.d. standard normal features and ``y = sum x + eps``."""
    rng = as_rng(seed)
    X = rng.standard_normal((n, d))
    y = X.sum(axis=1) + rng.standard_normal(n)
    return np.column_stack([X, y])


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def source_hash(rows) -> str:
    arr = np.ascontiguousarray(np.asarray(rows, dtype=float))
    return hashlib.sha256(arr.tobytes() + str(arr.shape).encode()).hexdigest()[:16]


def write_synthetic_csv(path, rows, columns, method, seed, source) -> None:
    """CSV with ``#``-prefixed provenance lines (method, seed, B, source hash) above the header."""
    rows = np.asarray(rows, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# method={method}\n# seed={seed}\n# B={rows.shape[0]}\n# source_hash={source}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([repr(float(v)) for v in r])
