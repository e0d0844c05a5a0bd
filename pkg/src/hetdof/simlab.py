"""Simulation scenarios and experiment suites.

A :class:`Scenario` describes the covariate law, the linear mean, and the
variance function ``tau(x) = c (1 + |s|)^lambda`` where ``s`` is the true
mean (``tau_source="mean"``) or an independent standard normal draw
(``tau_source="independent"``). The constant ``c`` makes ``E[tau] = 1`` and
is fixed by a large pilot sample, which also supplies the population moments
used by the oracles.

Replicate ``r`` draws its randomness from ``SeedSequence(seed,
spawn_key=(1, r))``, so replicates can run in any order or in parallel.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .core import Dataset, WeightScheme
from .dof import df_r_exact, df_r_normal_approx, effective_sample_size, weight_path, zeta_tau
from .errors import ApproximationUndefinedError, DegenerateLeverageError, FoldFailureError, SingularDesignError
from .risk import PopulationTruth, kfold_cv_error, oracle_risk, select_size, werr_f_hat, werr_r_hat
from .synth import cart_fit, cart_sample, dfr_from_synthetic, nbe_fit, nbe_sample
from .wls import fit

ESTIMATORS = ("werr_r_hat", "loocv", "kfold", "synthetic")
RECORD_COLUMNS = ("replicate", "p", "estimator", "estimate", "truth")
SELECTION_COLUMNS = ("replicate", "estimator", "p_hat", "p_star", "risk_ratio")


@dataclass(frozen=True)
class Scenario:
    """Simulation design.

    ``coef_rule="decay"`` sets continuous coefficients ``a (1 - j/d)^5`` and
    ``"flat"`` sets them all equal; in both cases their squares sum to
    ``coef_norm``. Categorical coefficients are ``cat_coef_ratio`` times the
    continuous one of the same index.
    """

    n: int = 60
    d_continuous: int = 20
    d_categorical: int = 20
    component_kind: str = "mixture"
    sigma_v_kind: str = "iid"
    coef_rule: str = "decay"
    coef_norm: float = 5.0
    cat_coef_ratio: float = 2.0
    tau_exponent: float = 2.0
    tau_source: str = "mean"
    noise_scale: float = 1.0
    seed: int = 20240601
    pilot_size: int = 100_000

    def __post_init__(self):
        if self.component_kind not in ("single", "mixture"):
            raise ValueError(f"component_kind must be single or mixture, got {self.component_kind!r}")
        if self.sigma_v_kind not in ("iid", "equicorrelation", "ar1"):
            raise ValueError(f"unknown sigma_v_kind {self.sigma_v_kind!r}")
        if self.coef_rule not in ("decay", "flat"):
            raise ValueError(f"unknown coef_rule {self.coef_rule!r}")
        if self.tau_source not in ("mean", "independent"):
            raise ValueError(f"unknown tau_source {self.tau_source!r}")
        if self.n < 2 or self.d_continuous < 0 or self.d_categorical < 0 or self.d == 0:
            raise ValueError("scenario needs n >= 2 and at least one covariate")
        if self.tau_exponent < 0 or self.noise_scale < 0:
            raise ValueError("tau_exponent and noise_scale must be nonnegative")

    @property
    def d(self) -> int:
        return self.d_continuous + self.d_categorical

    @classmethod
    def from_dict(cls, spec: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        extra = set(spec) - known
        if extra:
            raise ValueError(f"unknown scenario fields: {sorted(extra)}")
        return cls(**spec)

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "Scenario":
        return Scenario(**{**asdict(self), **changes})


def figure1_scenario(tau_exponent: float = 0.5, seed: int = 20240601) -> Scenario:
    """Gaussian design with ``n = 100``, ``d = 50``, flat mean and independent ``tau``."""
    return Scenario(n=100, d_continuous=50, d_categorical=0, component_kind="single", coef_rule="flat",
                    coef_norm=10.0, tau_exponent=tau_exponent, tau_source="independent", seed=seed)


def alpha_path_scenario(seed: int = 20240601) -> Scenario:
    """Gaussian design with ``n = 100``, ``d = 20``, decaying mean and ``tau`` driven by the mean."""
    return Scenario(n=100, d_continuous=20, d_categorical=0, component_kind="single", coef_rule="decay",
                    coef_norm=10.0, tau_exponent=2.0, tau_source="mean", seed=seed)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def sigma_v(scenario: Scenario) -> np.ndarray:
    d = scenario.d_continuous
    if scenario.sigma_v_kind == "iid":
        return np.eye(d)
    if scenario.sigma_v_kind == "equicorrelation":
        return 0.5 * np.eye(d) + 0.5 * np.ones((d, d))
    idx = np.arange(d)
    return 2.0 ** (-np.abs(idx[:, None] - idx[None, :]))


def coefficients(scenario: Scenario) -> np.ndarray:
    """Coefficients in design order (continuous block, then categorical block)."""
    dv, dc = scenario.d_continuous, scenario.d_categorical
    length = max(dv, dc)
    j = np.arange(1, length + 1)
    shape = (1.0 - j / length) ** 5 if scenario.coef_rule == "decay" else np.ones(length)
    base = shape[:dv] if dv else shape
    a = math.sqrt(scenario.coef_norm / np.sum(base**2)) if np.sum(base**2) > 0 else 0.0
    shape = a * shape
    return np.concatenate([shape[:dv], scenario.cat_coef_ratio * shape[:dc]])


def column_names(scenario: Scenario) -> list[str]:
    return [f"V{j + 1}" for j in range(scenario.d_continuous)] + [f"C{j + 1}" for j in range(scenario.d_categorical)]


def categorical_columns(scenario: Scenario) -> list[int]:
    return list(range(scenario.d_continuous, scenario.d))


def subset_order(scenario: Scenario) -> list[int]:
    """Design columns in the order V1, C1, V2, C2, ... (leftovers appended)."""
    dv, dc = scenario.d_continuous, scenario.d_categorical
    order = []
    for j in range(max(dv, dc)):
        if j < dv:
            order.append(j)
        if j < dc:
            order.append(dv + j)
    return order


def draw_covariates(scenario: Scenario, rng: np.random.Generator, size: int):
    """Draw ``size`` covariate rows and the latent signs ``Z`` (zeros for a single component)."""
    dv, dc = scenario.d_continuous, scenario.d_categorical
    mixture = scenario.component_kind == "mixture"
    z = rng.choice([-1.0, 1.0], size=size) if mixture else np.zeros(size)
    V = rng.standard_normal((size, dv)) @ np.linalg.cholesky(sigma_v(scenario)).T if dv else np.zeros((size, 0))
    if mixture and dv:
        V += z[:, None] * np.log(np.arange(1, dv + 1))[None, :]
    C = np.empty((size, dc))
    if dc:
        u = rng.random((size, dc))
        C[:, 0] = np.where(u[:, 0] < 0.5, 1.0, -1.0)
        for j in range(1, dc):
            # position j + 1 in one-based indexing
            p_plus = 0.5 + z * C[:, j - 1] / (4.0 + math.log(j + 1)) if mixture else np.full(size, 0.5)
            C[:, j] = np.where(u[:, j] < p_plus, 1.0, -1.0)
    return np.hstack([V, C]), z


def _tau_shape(scenario, rows, rng):
    if scenario.tau_source == "mean":
        s = rows @ coefficients(scenario)
    else:
        s = rng.standard_normal(rows.shape[0])
    return (1.0 + np.abs(s)) ** scenario.tau_exponent


@dataclass(frozen=True, eq=False)
class Pilot:
    """Population constants estimated once per scenario.

    ``moment_w`` is ``E(w* x x^T)`` under ``w = 1/tau`` and ``moment_1`` is
    ``E(x x^T)``.
    """

    tau_constant: float
    moment_w: np.ndarray
    moment_1: np.ndarray
    expected_w: float


def _pilot_rng(scenario):
    return np.random.default_rng(np.random.SeedSequence(scenario.seed, spawn_key=(0,)))


@lru_cache(maxsize=32)
def pilot(scenario: Scenario) -> Pilot:
    rng = _pilot_rng(scenario)
    rows, _ = draw_covariates(scenario, rng, scenario.pilot_size)
    shape = _tau_shape(scenario, rows, rng)
    c = 1.0 / float(np.mean(shape))
    w = 1.0 / (c * shape)
    B = rows.shape[0]
    Mw = (rows * w[:, None]).T @ rows / B
    M1 = rows.T @ rows / B
    return Pilot(c, 0.5 * (Mw + Mw.T), 0.5 * (M1 + M1.T), float(np.mean(w)))


def tau_of_rows(scenario: Scenario, rows) -> np.ndarray:
    """Normalised ``tau`` at covariate rows; only defined when ``tau`` depends on the mean."""
    if scenario.tau_source != "mean":
        raise ValueError("tau is not a function of the covariates in this scenario")
    rows = np.asarray(rows, dtype=float)
    return pilot(scenario).tau_constant * (1.0 + np.abs(rows @ coefficients(scenario))) ** scenario.tau_exponent


def replicate_seed(scenario: Scenario, replicate_index: int, stream: int = 1) -> np.random.SeedSequence:
    return np.random.SeedSequence(scenario.seed, spawn_key=(stream, int(replicate_index)))


def generate(scenario: Scenario, replicate_index: int = 0) -> Dataset:
    """One training sample ``(X, y)`` with its true mean and tabulated ``tau``."""
    rng = np.random.default_rng(replicate_seed(scenario, replicate_index))
    X, _ = draw_covariates(scenario, rng, scenario.n)
    tau = pilot(scenario).tau_constant * _tau_shape(scenario, X, rng)
    mu = X @ coefficients(scenario)
    y = mu + math.sqrt(scenario.noise_scale) * np.sqrt(tau) * rng.standard_normal(scenario.n)
    return Dataset(X, y, true_mean=mu, variance_factors=tau, noise_scale=scenario.noise_scale,
                   column_names=tuple(column_names(scenario)))


def nested_columns(scenario: Scenario) -> list[list[int]]:
    order = subset_order(scenario)
    return [order[:p] for p in range(len(order) + 1)]


def population_truth(scenario: Scenario) -> PopulationTruth:
    """Moments for the oracle under ``w = 1/tau`` (so ``E(w* tau*) = 1``)."""
    return PopulationTruth.linear(coefficients(scenario), pilot(scenario).moment_w, 1.0)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    """Tidy per-replicate records plus the seeds that produced them."""

    kind: str
    scenario: Scenario
    records: list
    selections: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    @property
    def replicates(self) -> int:
        return len(self.seeds)

    def summary(self) -> dict:
        if self.kind == "comparison":
            return summarize_comparison(self.records, self.selections)
        if self.kind == "weights":
            return summarize_weights(self.selections)
        return {}

    def write(self, directory, prefix=None) -> list[str]:
        """Write records and selections as CSV; returns the file paths."""
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        prefix = prefix or self.kind
        paths = []
        if self.records:
            path = directory / f"{prefix}_records.csv"
            write_records(path, self.records)
            paths.append(str(path))
        if self.selections:
            path = directory / f"{prefix}_selections.csv"
            write_records(path, self.selections)
            paths.append(str(path))
        path = directory / f"{prefix}_seeds.csv"
        write_records(path, self.seeds)
        paths.append(str(path))
        return paths


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_records(path, records, columns=None) -> None:
    columns = list(columns or (records[0].keys() if records else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            writer.writerow([_fmt(rec.get(c, "")) for c in columns])


def read_records(path) -> list[dict]:
    """Read a tidy CSV back, converting numeric fields (empty fields become NaN)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if v == "":
                    rec[k] = float("nan")
                    continue
                try:
                    rec[k] = int(v)
                except ValueError:
                    try:
                        rec[k] = float(v)
                    except ValueError:
                        rec[k] = v
            out.append(rec)
    return out


def _seed_record(scenario, r):
    ss = replicate_seed(scenario, r)
    return {"replicate": r, "entropy": ss.entropy, "spawn_key": "-".join(map(str, ss.spawn_key))}


def _run(fn, args, workers):
    if workers and workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, *zip(*args)))
    return [fn(*a) for a in args]


# ---------------------------------------------------------------------------
# estimator comparison
# ---------------------------------------------------------------------------


def _safe(fn, *args):
    try:
        return fn(*args)
    except (DegenerateLeverageError, FoldFailureError, SingularDesignError):
        return float("nan")


def comparison_replicate(scenario: Scenario, r: int, B: int = 1000, k: int = 5) -> list[dict]:
    """All four estimates and the oracle risk for every nested model of replicate ``r``."""
    data = generate(scenario, r)
    tau = data.variance_factors
    scheme = WeightScheme.inverse_tau(tau)
    truth = population_truth(scenario)
    cats = categorical_columns(scenario)
    s_nbe, s_syn, s_joint, s_jsyn, s_fold = np.random.SeedSequence(scenario.seed, spawn_key=(2, r)).spawn(5)

    synth_x = nbe_sample(nbe_fit(data.design, cats, seed=s_nbe), B, s_syn)
    synth_w = 1.0 / tau_of_rows(scenario, synth_x)
    joint = nbe_sample(nbe_fit(np.column_stack([data.design, data.response]), cats, seed=s_joint), B, s_jsyn)
    joint_x, joint_y = joint[:, :-1], joint[:, -1]
    joint_w = 1.0 / tau_of_rows(scenario, joint_x)
    fold_seed = int(s_fold.generate_state(1)[0])

    out = []
    for cols in nested_columns(scenario):
        try:
            model = fit(data, scheme, cols)
        except SingularDesignError:
            continue
        p = len(cols)
        truth_p = oracle_risk(model, data.true_mean, tau, scenario.noise_scale, truth, scheme).werr_r_true
        dfr = dfr_from_synthetic(model, tau, scheme, synth_x, synth_w)
        try:
            rep = werr_r_hat(model, data.response, scheme, tau, scenario.noise_scale, dfr)
            est, loo = rep.werr_r_hat, rep.loocv
        except DegenerateLeverageError:
            est = loo = float("nan")
        kf = _safe(kfold_cv_error, data, scheme, cols, k, fold_seed)
        pred = joint_x[:, cols] @ model.coefficients
        syn = float(np.mean(joint_w * (joint_y - pred) ** 2))
        for name, value in zip(ESTIMATORS, (est, loo, kf, syn)):
            out.append({"replicate": r, "p": p, "estimator": name, "estimate": value, "truth": truth_p})
    return out


def _selections(records):
    by_rep = {}
    for rec in records:
        by_rep.setdefault(rec["replicate"], []).append(rec)
    out = []
    for r in sorted(by_rep):
        recs = by_rep[r]
        truth = {rec["p"]: rec["truth"] for rec in recs}
        sizes = sorted(truth)
        p_star = select_size(sizes, [truth[p] for p in sizes])
        for name in ESTIMATORS:
            est = {rec["p"]: rec["estimate"] for rec in recs if rec["estimator"] == name}
            if not est or all(math.isnan(v) for v in est.values()):
                continue
            ps = sorted(est)
            p_hat = select_size(ps, [est[p] for p in ps])
            out.append({"replicate": r, "estimator": name, "p_hat": p_hat, "p_star": p_star,
                        "risk_ratio": truth[p_hat] / truth[p_star]})
    return out


def run_estimator_comparison(scenario: Scenario, R: int = 100, B: int = 1000, k: int = 5, workers: int = 1) -> ExperimentResult:
    """Compare ``werr_r_hat`` (NBE-based ``df_R``), LOOCV, k-fold CV and joint synthesis."""
    pilot(scenario)
    chunks = _run(comparison_replicate, [(scenario, r, B, k) for r in range(R)], workers)
    records = [rec for chunk in chunks for rec in chunk]
    return ExperimentResult("comparison", scenario, records, _selections(records),
                            [_seed_record(scenario, r) for r in range(R)])


def summarize_comparison(records, selections=None) -> dict:
    """MSE per estimator and size, selection spread, and mean risk ratios."""
    selections = selections if selections is not None else _selections(records)
    mse = {}
    for name in ESTIMATORS:
        per_p = {}
        for rec in records:
            if rec["estimator"] == name and not math.isnan(rec["estimate"]):
                per_p.setdefault(rec["p"], []).append((rec["estimate"] - rec["truth"]) ** 2)
        mse[name] = {p: float(np.mean(v)) for p, v in sorted(per_p.items())}
    sel = {}
    for name in ESTIMATORS:
        diffs = np.array([s["p_hat"] - s["p_star"] for s in selections if s["estimator"] == name])
        ratios = np.array([s["risk_ratio"] for s in selections if s["estimator"] == name])
        if diffs.size == 0:
            continue
        q1, med, q3 = np.percentile(diffs, [25, 50, 75])
        values, counts = np.unique(diffs, return_counts=True)
        sel[name] = {
            "median_diff": float(med),
            "iqr_diff": float(q3 - q1),
            "mean_diff": float(diffs.mean()),
            "histogram": {int(v): int(c) for v, c in zip(values, counts)},
            "mean_ratio": float(ratios.mean()),
            "sd_ratio": float(ratios.std(ddof=1)) if ratios.size > 1 else float("nan"),
        }
    return {"mse": mse, "selection": sel}


# ---------------------------------------------------------------------------
# weight schemes
# ---------------------------------------------------------------------------


def weight_selection_replicate(scenario: Scenario, r: int) -> list[dict]:
    """Selected sizes under OLS and optimal-weight WLS, for both risk criteria.

    Predictive degrees of freedom are exact, using the pilot moments.
    """
    data = generate(scenario, r)
    tau = data.variance_factors
    P = pilot(scenario)
    schemes = {
        "wls": (WeightScheme.inverse_tau(tau), P.moment_w),
        "ols": (WeightScheme.equal(data.n), P.moment_1),
    }
    out = []
    for label, (scheme, moment) in schemes.items():
        sigma = moment / scheme.eval_weight_mean
        sizes, f_vals, r_vals = [], [], []
        for cols in nested_columns(scenario):
            try:
                model = fit(data, scheme, cols)
                dfr = df_r_exact(model, tau, scheme, sigma)
                rep = werr_r_hat(model, data.response, scheme, tau, scenario.noise_scale, dfr)
            except (SingularDesignError, DegenerateLeverageError):
                continue
            sizes.append(len(cols))
            f_vals.append(rep.werr_f_hat)
            r_vals.append(rep.werr_r_hat)
        for crit, vals in (("werr_f_hat", f_vals), ("werr_r_hat", r_vals)):
            out.append({"replicate": r, "scheme": label, "criterion": crit, "p_hat": select_size(sizes, vals)})
    return out


def alpha_path_replicate(scenario: Scenario, r: int, alphas, sizes) -> list[dict]:
    """Exact ``df_R`` along the path ``q = 1/(alpha + (1 - alpha) tau)`` with ``w = 1/tau``."""
    data = generate(scenario, r)
    tau = data.variance_factors
    w = 1.0 / tau
    sigma = pilot(scenario).moment_w / float(np.mean(w))
    order = subset_order(scenario)
    out = []
    for a in alphas:
        scheme = WeightScheme(weight_path(float(a), tau), w)
        for p in sizes:
            model = fit(data, scheme, order[:p])
            out.append({"replicate": r, "alpha": float(a), "p": int(p),
                        "df_r": df_r_exact(model, tau, scheme, sigma).df_r})
    return out


def run_weight_study(scenario: Scenario, R: int = 100, alphas=None, sizes=(1, 5, 10, 20), workers: int = 1) -> ExperimentResult:
    """OLS-versus-WLS selection study, or the ``df_R(alpha)`` path when ``alphas`` is given."""
    pilot(scenario)
    seeds = [_seed_record(scenario, r) for r in range(R)]
    if alphas is not None:
        sizes = [p for p in sizes if p <= scenario.d]
        chunks = _run(alpha_path_replicate, [(scenario, r, tuple(alphas), tuple(sizes)) for r in range(R)], workers)
        return ExperimentResult("alpha_path", scenario, [x for c in chunks for x in c], [], seeds)
    chunks = _run(weight_selection_replicate, [(scenario, r) for r in range(R)], workers)
    return ExperimentResult("weights", scenario, [], [x for c in chunks for x in c], seeds)


def summarize_weights(selections) -> dict:
    out = {}
    for rec in selections:
        key = f"{rec['scheme']}:{rec['criterion']}"
        out.setdefault(key, []).append(rec["p_hat"])
    return {k: {"mean": float(np.mean(v)), "sd": float(np.std(v, ddof=1)) if len(v) > 1 else float("nan")}
            for k, v in out.items()}


# ---------------------------------------------------------------------------
# degrees-of-freedom curves
# ---------------------------------------------------------------------------


def approximation_study(scenario: Scenario, replicate_index: int = 0) -> list[dict]:
    """Exact ``df_R`` under ``q = w = 1/tau`` against the Gaussian-design approximation."""
    data = generate(scenario, replicate_index)
    tau = data.variance_factors
    scheme = WeightScheme.inverse_tau(tau)
    sigma = pilot(scenario).moment_w / scheme.eval_weight_mean
    zeta, n_tau = zeta_tau(tau), effective_sample_size(tau)
    order = subset_order(scenario)
    out = []
    for p in range(1, len(order) + 1):
        model = fit(data, scheme, order[:p])
        pair = df_r_exact(model, tau, scheme, sigma)
        try:
            approx = df_r_normal_approx(p, zeta, n_tau)
        except ApproximationUndefinedError:
            approx = float("nan")
        out.append({"p": p, "df_f": pair.df_f, "df_r": pair.df_r, "df_r_approx": approx,
                    "rel_error": (approx - pair.df_r) / pair.df_r, "zeta_tau": zeta, "n_tau": n_tau})
    return out


def synthetic_df_study(scenario: Scenario, replicate_index: int = 0, methods=("nbe", "cart"), repeats: int = 10, B: int = 1000) -> list[dict]:
    """``df_R`` estimated from repeated synthetic samples next to the exact value and ``df_F``."""
    data = generate(scenario, replicate_index)
    tau = data.variance_factors
    scheme = WeightScheme.inverse_tau(tau)
    sigma = pilot(scenario).moment_w / scheme.eval_weight_mean
    cats = categorical_columns(scenario)
    models = [fit(data, scheme, cols) for cols in nested_columns(scenario)[1:]]
    exact = [df_r_exact(m, tau, scheme, sigma) for m in models]
    root = np.random.SeedSequence(scenario.seed, spawn_key=(3, replicate_index))
    out = []
    for method, ss in zip(methods, root.spawn(len(methods))):
        fit_ss, *draw_ss = ss.spawn(repeats + 1)
        if method == "nbe":
            gen = nbe_fit(data.design, cats, seed=fit_ss)
            draw = nbe_sample
        elif method == "cart":
            gen = cart_fit(data.design, cats, seed=fit_ss)
            draw = cart_sample
        else:
            raise ValueError(f"unknown method {method!r}")
        for rep, ds in enumerate(draw_ss):
            rows = draw(gen, B, ds)
            w_rows = 1.0 / tau_of_rows(scenario, rows) if scenario.tau_source == "mean" else None
            for m, ex in zip(models, exact):
                est = dfr_from_synthetic(m, tau, scheme, rows, w_rows)
                out.append({"method": method, "repeat": rep, "p": m.p, "df_r_hat": est.df_r,
                            "df_r_se": est.df_r_se, "df_r": ex.df_r, "df_f": ex.df_f})
    return out
