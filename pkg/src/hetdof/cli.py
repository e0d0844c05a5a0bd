"""Command-line interface.

Every subcommand reads a JSON config (``--config``) whose keys may be
overridden by flags, writes tidy CSV files plus ``manifest.json`` into
``--out``, and exits with 0 on success, 2 on configuration errors and 3 on
numerical failures.

Data come either from a simulation scenario (``"scenario"``: an inline
object or a JSON path, plus ``"replicate"``) or from a CSV file with a schema
(``"data"``, ``"schema"``).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import Schema, WeightScheme, read_csv, seed_sequence
from .dof import df_curve, df_r_exact, dfr_from_rows, weight_path, write_curve
from .errors import (
    ConfigError,
    DegenerateLeverageError,
    EstimationError,
    FitError,
    FoldFailureError,
    HetdofError,
    SchemaMismatchError,
    SingularDesignError,
)
from .risk import estimate_sigma2, risk_curve, select_size, write_risk_curve
from .simlab import (
    Scenario,
    alpha_path_scenario,
    figure1_scenario,
    approximation_study,
    categorical_columns,
    column_names,
    generate,
    pilot,
    read_records,
    run_estimator_comparison,
    run_weight_study,
    subset_order,
    summarize_comparison,
    summarize_weights,
    synthetic_df_study,
    tau_of_rows,
    write_records,
)
from .synth import cart_fit, cart_sample, nbe_fit, nbe_sample, source_hash, write_synthetic_csv
from .wls import fit

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CRITERIA = ("werr_r_hat", "werr_f_hat", "loocv", "kfold")
NUMERIC_ERRORS = (
    SingularDesignError,
    DegenerateLeverageError,
    EstimationError,
    FitError,
    FoldFailureError,
    np.linalg.LinAlgError,
    ArithmeticError,
)


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _load_json(value):
    if isinstance(value, (dict, list)):
        return value
    path = Path(value)
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def build_config(args) -> dict:
    cfg = dict(_load_json(args.config)) if args.config else {}
    for key in ("seed", "replicates", "threads", "data", "schema", "scenario", "sigma2", "criterion",
                "method", "experiment", "B", "input", "weights", "dfr", "replicate"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    cfg.setdefault("seed", 0)
    try:
        cfg["seed"] = int(cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}") from exc
    if cfg["seed"] < 0:
        raise ConfigError("seed must be nonnegative")
    return cfg


def _scenario(cfg) -> Scenario:
    """Scenario from a preset name, a JSON path or an inline object; the run seed replaces its seed."""
    spec = cfg["scenario"]
    presets = {"mixture": Scenario, "figure1": figure1_scenario, "alpha_path": alpha_path_scenario}
    if isinstance(spec, str) and spec in presets:
        sc = presets[spec]()
    else:
        try:
            sc = Scenario.from_dict(_load_json(spec))
        except TypeError as exc:
            raise ConfigError(f"invalid scenario: {exc}") from exc
    return sc.replace(seed=cfg["seed"])


class Problem:
    """A dataset with everything needed to evaluate risks along a subset path."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.scenario = None
        if "scenario" in cfg:
            self.scenario = _scenario(cfg)
            self.data = generate(self.scenario, int(cfg.get("replicate", 0)))
            names = column_names(self.scenario)
            self.order = list(cfg.get("order", [names[j] for j in subset_order(self.scenario)]))
            self.categorical = categorical_columns(self.scenario)
        elif "data" in cfg:
            if "schema" not in cfg:
                raise ConfigError("a CSV input needs a schema")
            schema = cfg["schema"]
            schema = Schema.from_dict(schema) if isinstance(schema, dict) else schema
            self.data = read_csv(cfg["data"], schema)
            self.order = list(cfg.get("order", self.data.variables))
            self.categorical = self._categorical_from_schema(schema)
        else:
            raise ConfigError("config needs either 'scenario' or 'data'")
        d = self.data
        self.tau = d.variance_factors if d.variance_factors is not None else np.ones(d.n)
        self.scheme = self._weights(cfg.get("weights", "inverse_tau"))
        try:
            self.subsets = d.nested_subsets(self.order)
        except SchemaMismatchError as exc:
            raise ConfigError(str(exc)) from exc

    def _categorical_from_schema(self, schema):
        if not isinstance(schema, Schema):
            schema = Schema.from_dict(_load_json(schema))
        cols = []
        lookup = dict(self.data.variable_groups)
        for spec in schema.predictors:
            if spec.kind == "categorical" and spec.name in lookup:
                cols.extend(lookup[spec.name])
        return cols

    def _weights(self, spec) -> WeightScheme:
        n = self.data.n
        if spec == "equal":
            return WeightScheme.equal(n)
        if spec == "inverse_tau":
            return WeightScheme.inverse_tau(self.tau)
        if isinstance(spec, dict) and "alpha" in spec:
            alpha = float(spec["alpha"])
            if not 0 <= alpha <= 1:
                raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
            return WeightScheme(weight_path(alpha, self.tau), 1.0 / self.tau)
        if isinstance(spec, dict) and "fit" in spec:
            q = np.asarray(spec["fit"], dtype=float)
            w = np.asarray(spec.get("eval", spec["fit"]), dtype=float)
            if q.shape != (n,) or w.shape != (n,):
                raise ConfigError("weight vectors must have one entry per row")
            return WeightScheme(q, w)
        raise ConfigError(f"unknown weight spec {spec!r}; use equal, inverse_tau, {{'alpha': a}} or {{'fit': [...]}}")

    @property
    def sigma2(self):
        value = self.cfg.get("sigma2", self.data.noise_scale)
        if value == "estimate":
            model = fit(self.data, self.scheme, self.subsets[-1])
            return estimate_sigma2(model, None, self.scheme, self.tau)
        if value is None:
            raise ConfigError("sigma2 is required (a number, or \"estimate\")")
        return float(value)

    def exact_sigma(self):
        """Full-design moment matrix when the population is known, else ``None``."""
        if self.scenario is None:
            return None
        P = pilot(self.scenario)
        if np.allclose(self.scheme.eval_weights, 1.0 / self.tau):
            return P.moment_w / self.scheme.eval_weight_mean
        if np.allclose(self.scheme.eval_weights, self.scheme.eval_weights[0]):
            return P.moment_1 * self.scheme.eval_weights[0] / self.scheme.eval_weight_mean
        return None

    def synthetic(self, method, B, seed):
        """Synthetic rows and their evaluation weights.

        Without a known weight function the log evaluation weight is
        synthesized together with the covariates.
        """
        ss_fit, ss_draw = seed_sequence(seed).spawn(2)
        d = self.data
        known = self.scenario is not None and self.scenario.tau_source == "mean"
        constant_w = np.allclose(self.scheme.eval_weights, self.scheme.eval_weights[0])
        rows = d.design if (known or constant_w) else np.column_stack([d.design, np.log(self.scheme.eval_weights)])
        if method == "nbe":
            draw = nbe_sample(nbe_fit(rows, self.categorical, seed=ss_fit), B, ss_draw)
        elif method == "cart":
            draw = cart_sample(cart_fit(rows, self.categorical, seed=ss_fit), B, ss_draw)
        else:
            raise ConfigError(f"unknown synthesis method {method!r}")
        if known and not constant_w:
            x = draw
            wstar = 1.0 / tau_of_rows(self.scenario, x)
            if not np.allclose(self.scheme.eval_weights, 1.0 / self.tau):
                raise ConfigError("synthetic weights are only known for w = 1/tau or constant w")
        elif constant_w:
            x, wstar = draw, np.full(B, self.scheme.eval_weights[0])
        else:
            x, wstar = draw[:, :-1], np.exp(draw[:, -1])
        return x, wstar

    def dfr_fn(self):
        """Callable giving ``df_R`` for a fitted model, chosen by the ``dfr`` key."""
        source = self.cfg.get("dfr", "exact" if self.scenario is not None else "nbe")
        if source == "none":
            return None, source
        if source == "exact":
            sigma = self.exact_sigma()
            if sigma is None:
                raise ConfigError("exact df_R needs a simulation scenario with w = 1/tau or constant w")
            return (lambda m: df_r_exact(m, self.tau, self.scheme, sigma)), source
        if source in ("nbe", "cart"):
            B = int(self.cfg.get("B", 1000))
            if B < 100:
                raise ConfigError("B must be at least 100")
            x, wstar = self.synthetic(source, B, self.cfg["seed"])
            return (lambda m: dfr_from_rows(m, self.tau, self.scheme, x, wstar)), source
        raise ConfigError(f"unknown dfr source {source!r}; use exact, nbe, cart or none")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_dof(cfg, out: Path) -> dict:
    prob = Problem(cfg)
    fn, source = prob.dfr_fn()
    rows = df_curve(prob.data, prob.scheme, prob.tau, prob.subsets[1:], sigma=None, seed=cfg["seed"])
    for rec, cols in zip(rows, prob.subsets[1:]):
        if fn is not None:
            pair = fn(fit(prob.data, prob.scheme, cols))
            key = "df_r" if source == "exact" else "df_r_mc"
            rec[key] = pair.df_r
            if key == "df_r_mc":
                rec["df_r_mc_se"] = pair.df_r_se
    write_curve(rows, out / "df_curve.csv")
    return {"outputs": ["df_curve.csv"], "dfr_source": source}


def _risk_rows(prob, cfg):
    fn, source = prob.dfr_fn()
    k = cfg.get("k", 5)
    return risk_curve(prob.data, prob.scheme, prob.sigma2, prob.tau, prob.subsets, df_r_fn=fn,
                      k=int(k) if k else None, seed=cfg["seed"]), source


def cmd_risk(cfg, out: Path) -> dict:
    prob = Problem(cfg)
    rows, source = _risk_rows(prob, cfg)
    write_risk_curve(rows, out / "risk_curve.csv")
    return {"outputs": ["risk_curve.csv"], "dfr_source": source}


def cmd_select(cfg, out: Path) -> dict:
    prob = Problem(cfg)
    criterion = cfg.get("criterion", "werr_r_hat")
    if criterion not in CRITERIA:
        raise ConfigError(f"criterion must be one of {CRITERIA}")
    if criterion == "werr_f_hat":
        cfg = {**cfg, "dfr": "none"}
    rows, source = _risk_rows(prob, cfg)
    write_risk_curve(rows, out / "risk_curve.csv")
    sizes = [r["p"] for r in rows]
    chosen = {}
    for crit in CRITERIA:
        vals = [r[crit] for r in rows]
        if all(math.isnan(v) for v in vals):
            continue
        chosen[crit] = select_size(sizes, vals)
    if criterion not in chosen:
        raise ConfigError(f"criterion {criterion} could not be evaluated")
    result = {"criterion": criterion, "p_hat": chosen[criterion], "all_criteria": chosen,
              "variables": prob.order[: _n_vars(prob, chosen[criterion])]}
    with open(out / "selection.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    print(f"p_hat={chosen[criterion]} ({criterion})")
    return {"outputs": ["risk_curve.csv", "selection.json"], "p_hat": chosen[criterion], "dfr_source": source}


def _n_vars(prob, p):
    for i, cols in enumerate(prob.subsets):
        if len(cols) == p:
            return i
    return 0


def cmd_synth(cfg, out: Path) -> dict:
    prob = Problem(cfg)
    method = cfg.get("method", "nbe")
    B = int(cfg.get("B", 1000))
    x, wstar = prob.synthetic(method, B, cfg["seed"])
    write_synthetic_csv(out / "synthetic.csv", x, list(prob.data.column_names), method, cfg["seed"],
                        source_hash(prob.data.design))
    rows = df_curve(prob.data, prob.scheme, prob.tau, prob.subsets[1:], seed=cfg["seed"])
    sigma = prob.exact_sigma()
    for rec, cols in zip(rows, prob.subsets[1:]):
        model = fit(prob.data, prob.scheme, cols)
        pair = dfr_from_rows(model, prob.tau, prob.scheme, x, wstar)
        rec["df_r_mc"], rec["df_r_mc_se"] = pair.df_r, pair.df_r_se
        if sigma is not None:
            rec["df_r"] = df_r_exact(model, prob.tau, prob.scheme, sigma).df_r
    write_curve(rows, out / "dfr_synthetic.csv")
    return {"outputs": ["synthetic.csv", "dfr_synthetic.csv"]}


EXPERIMENTS = ("comparison", "weights", "alpha_path", "approximation", "df_study")


def cmd_simulate(cfg, out: Path) -> dict:
    experiment = cfg.get("experiment", "comparison")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
    if "scenario" not in cfg:
        cfg["scenario"] = {"alpha_path": "alpha_path", "approximation": "figure1"}.get(experiment, "mixture")
    sc = _scenario(cfg)
    R = int(cfg.get("replicates", 100))
    if R < 1:
        raise ConfigError("replicates must be at least 1")
    workers = int(cfg.get("threads", 1))
    outputs = []
    if experiment == "comparison":
        res = run_estimator_comparison(sc, R, B=int(cfg.get("B", 1000)), k=int(cfg.get("k", 5)), workers=workers)
        outputs = res.write(out)
    elif experiment == "weights":
        outputs = run_weight_study(sc, R, workers=workers).write(out)
    elif experiment == "alpha_path":
        alphas = cfg.get("alphas", [round(a, 2) for a in np.linspace(0, 1, 21)])
        sizes = cfg.get("sizes", [1, 5, 10, 20])
        outputs = run_weight_study(sc, R, alphas=alphas, sizes=sizes, workers=workers).write(out)
    elif experiment == "approximation":
        path = out / "approximation.csv"
        write_records(path, approximation_study(sc, int(cfg.get("replicate", 0))))
        outputs = [str(path)]
    else:
        path = out / "df_study.csv"
        write_records(path, synthetic_df_study(sc, int(cfg.get("replicate", 0)), repeats=R, B=int(cfg.get("B", 1000))))
        outputs = [str(path)]
    return {"outputs": [Path(p).name for p in outputs], "scenario": sc.to_dict(), "replicates": R}


def cmd_report(cfg, out: Path) -> dict:
    src = Path(cfg.get("input", out))
    if not src.is_dir():
        raise ConfigError(f"report input directory not found: {src}")
    outputs, tables = [], {}
    comp = src / "comparison_records.csv"
    if comp.exists():
        sel_path = src / "comparison_selections.csv"
        records = read_records(comp)
        selections = read_records(sel_path) if sel_path.exists() else None
        summary = summarize_comparison(records, selections)
        sizes = sorted({p for m in summary["mse"].values() for p in m})
        mse_rows = [{"p": p, **{e: summary["mse"][e].get(p, float("nan")) for e in summary["mse"]}} for p in sizes]
        write_records(out / "mse_table.csv", mse_rows)
        sel_rows = [{"estimator": e, **{k: v for k, v in s.items() if k != "histogram"}}
                    for e, s in summary["selection"].items()]
        write_records(out / "selection_table.csv", sel_rows)
        hist_rows = [{"estimator": e, "p_hat_minus_p_star": k, "count": c}
                     for e, s in summary["selection"].items() for k, c in sorted(s["histogram"].items())]
        write_records(out / "selection_histogram.csv", hist_rows)
        outputs += ["mse_table.csv", "selection_table.csv", "selection_histogram.csv"]
        tables["mse"], tables["selection"] = mse_rows, sel_rows
        _print_table("selection", sel_rows)
    wsel = src / "weights_selections.csv"
    if wsel.exists():
        summ = summarize_weights(read_records(wsel))
        rows = [{"scheme_criterion": k, **v} for k, v in summ.items()]
        write_records(out / "weights_table.csv", rows)
        outputs.append("weights_table.csv")
        tables["weights"] = rows
        _print_table("weights", rows)
    if not outputs:
        raise ConfigError(f"no experiment results found in {src}")
    if cfg.get("figures"):
        from .plots import render_report

        outputs += render_report(tables, out)
    return {"outputs": outputs}


def _print_table(title, rows):
    if not rows:
        return
    cols = list(rows[0])
    print(f"[{title}]")
    print(",".join(cols))
    for r in rows:
        print(",".join(f"{v:.4g}" if isinstance(v, float) else str(v) for v in r.values()))


COMMANDS = {
    "dof": cmd_dof,
    "risk": cmd_risk,
    "select": cmd_select,
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetdof", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "dof": "degrees-of-freedom curve along a nested subset path",
        "risk": "risk-curve estimates along a nested subset path",
        "select": "choose the model size minimising a risk criterion",
        "synth": "synthetic covariates and the df_R estimate they imply",
        "simulate": "run a simulation experiment",
        "report": "summary tables from simulation outputs",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--replicates", type=int, help="replicate count for simulations")
        p.add_argument("--threads", type=int, help="worker processes for replicate loops")
        if name in ("dof", "risk", "select", "synth"):
            p.add_argument("--data", help="CSV input")
            p.add_argument("--schema", help="JSON schema for the CSV input")
            p.add_argument("--scenario", help="scenario JSON file or a preset (mixture, figure1, alpha_path)")
            p.add_argument("--replicate", type=int, help="scenario replicate index")
            p.add_argument("--sigma2", help="error variance scale, or 'estimate'")
            p.add_argument("--dfr", choices=("exact", "nbe", "cart", "none"), help="source of df_R")
            p.add_argument("--B", type=int, help="synthetic sample size")
        if name == "select":
            p.add_argument("--criterion", choices=CRITERIA)
        if name == "synth":
            p.add_argument("--method", choices=("nbe", "cart"))
        if name == "simulate":
            p.add_argument("--experiment", choices=EXPERIMENTS)
            p.add_argument("--scenario", help="scenario JSON file or a preset")
            p.add_argument("--B", type=int, help="synthetic sample size")
        if name == "report":
            p.add_argument("--input", help="directory holding simulation CSVs (default: --out)")
            p.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        cfg = build_config(args)
        if getattr(args, "figures", False):
            cfg["figures"] = True
        if isinstance(cfg.get("sigma2"), str) and cfg["sigma2"] != "estimate":
            try:
                cfg["sigma2"] = float(cfg["sigma2"])
            except ValueError as exc:
                raise ConfigError(f"sigma2 must be a number or 'estimate', got {cfg['sigma2']!r}") from exc
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        info = COMMANDS[args.command](cfg, out)
    except NUMERIC_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, SchemaMismatchError, ValueError, KeyError, TypeError, OSError, HetdofError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = {
        "command": args.command,
        "config": {k: v for k, v in cfg.items() if k != "command"},
        "version": __version__,
        "wall_time_seconds": round(time.perf_counter() - start, 3),
        **info,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
