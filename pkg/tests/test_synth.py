import numpy as np
import pytest

from hetdof.dof import df_r_exact
from hetdof.errors import FitError, SchemaMismatchError
from hetdof.simlab import Scenario, draw_covariates
from hetdof.synth import (
    EmConfig,
    cart_fit,
    cart_sample,
    demo_rows,
    dfr_from_synthetic,
    joint_synthesis_demo,
    nbe_fit,
    nbe_sample,
    nbe_select_k,
    source_hash,
    synthesize,
    write_synthetic_csv,
)
from hetdof.wls import fit_design


def test_nbe_single_component_closed_form():
    rng = np.random.default_rng(0)
    X = rng.normal([1.0, -2.0], [1.0, 3.0], size=(300, 2))
    model = nbe_fit(X, categorical=[], K=1)
    np.testing.assert_allclose(model.means[0], X.mean(axis=0), atol=1e-8)
    np.testing.assert_allclose(model.variances[0], X.var(axis=0), atol=1e-8)
    assert model.mixing_weights.sum() == pytest.approx(1.0, abs=1e-10)


def test_nbe_recovers_separated_clusters_and_em_is_monotone():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.normal(-5, 1, (200, 3)), rng.normal(5, 1, (200, 3))])
    model = nbe_fit(X, categorical=[], K=2, seed=2)
    np.testing.assert_allclose(np.sort(model.mixing_weights), [0.5, 0.5], atol=0.05)
    trace = model.em_trace
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]).clip(1))
    assert np.all(model.variances >= model.variance_floor)


def test_nbe_latent_split_tracks_mixture_sign():
    sc = Scenario()
    rng = np.random.default_rng(3)
    X, z = draw_covariates(sc, rng, 400)
    model = nbe_fit(X, list(range(20, 40)), K=2, seed=4)
    label = model.responsibilities(X).argmax(axis=1)
    agree = np.mean(label == (z > 0))
    assert max(agree, 1 - agree) > 0.8


def test_nbe_sampling_moments_and_determinism():
    rng = np.random.default_rng(5)
    X = np.column_stack([rng.normal(2.0, 1.5, 500), np.where(rng.random(500) < 0.9, 1.0, -1.0)])
    model = nbe_fit(X, categorical=[1], K=1)
    S = nbe_sample(model, 50_000, seed=6)
    assert abs(S[:, 0].mean() - model.means[0, 0]) < 3 * np.sqrt(model.variances[0, 0] / 50_000)
    p = model.level_probs[0][0, list(model.levels[0]).index(1.0)]
    freq = np.mean(S[:, 1] == 1.0)
    assert abs(freq - p) < 3 * np.sqrt(p * (1 - p) / 50_000)
    assert set(np.unique(S[:, 1])) <= {-1.0, 1.0}
    np.testing.assert_array_equal(nbe_sample(model, 100, seed=7), nbe_sample(model, 100, seed=7))


def test_nbe_fit_errors_and_select_k():
    with pytest.raises(FitError):
        nbe_fit(np.zeros((2, 1)), K=3)
    rng = np.random.default_rng(8)
    X = np.vstack([rng.normal(-6, 1, (150, 2)), rng.normal(6, 1, (150, 2))])
    assert nbe_select_k(X, categorical=[], ks=(1, 2), em_config=EmConfig(n_restarts=2)) == 2


def test_cart_single_column_is_bootstrap():
    x = np.arange(20.0)[:, None]
    synth = cart_fit(x)
    S = cart_sample(synth, 1000, seed=0)
    assert set(np.unique(S)) <= set(x[:, 0])


def test_cart_preserves_exact_relation_within_leaf_spread():
    rng = np.random.default_rng(9)
    x1 = rng.standard_normal(400)
    synth = cart_fit(np.column_stack([x1, 2 * x1]), categorical=[], seed=1)
    S = cart_sample(synth, 2000, seed=2)
    _, _, tree, values = synth.steps[1]
    spread = max(v.max() - v.min() for v in values.values())
    assert np.max(np.abs(S[:, 1] - 2 * S[:, 0])) <= spread + 1e-12
    assert all(v.size >= synth.min_leaf for v in values.values())


def test_cart_derived_columns_and_validation():
    rng = np.random.default_rng(10)
    x = rng.uniform(1, 5, 100)
    rows = np.column_stack([x, np.log(x), rng.standard_normal(100)])
    synth = cart_fit(rows, categorical=[], derived={1: (0, "log")}, seed=0)
    S = cart_sample(synth, 500, seed=1)
    np.testing.assert_allclose(S[:, 1], np.log(S[:, 0]))
    with pytest.raises(ValueError):
        cart_fit(rows, min_leaf=2)
    with pytest.raises(SchemaMismatchError):
        cart_fit(rows, order=[0, 0, 1])


def test_dfr_from_training_rows_collapses_to_df_f():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((30, 3))
    model = fit_design(X, np.zeros(30), np.ones(30))
    pair = dfr_from_synthetic(model, np.ones(30), np.ones(30), X)
    assert pair.df_r == pytest.approx(pair.df_f, abs=1e-10)


def test_dfr_from_synthetic_between_df_f_and_df_r_iid():
    # larger X than the training sample concentrates the synthetic moment near the truth
    rng = np.random.default_rng(12)
    n, p = 60, 10
    X = rng.standard_normal((n, p))
    model = fit_design(X, np.zeros(n), np.ones(n))
    exact = df_r_exact(model, np.ones(n), np.ones(n), np.eye(p))
    S = synthesize(X, "nbe", B=20_000, seed=3, categorical=[])
    est = dfr_from_synthetic(model, np.ones(n), np.ones(n), S)
    assert exact.df_f - 3 * est.df_r_se < est.df_r < exact.df_r + 3 * est.df_r_se


def test_synthetic_estimates_stable_across_draws():
    rng = np.random.default_rng(13)
    X = rng.standard_normal((60, 6))
    model = fit_design(X, np.zeros(60), np.ones(60))
    gen = nbe_fit(X, categorical=[], seed=0)
    a = dfr_from_synthetic(model, np.ones(60), np.ones(60), nbe_sample(gen, 1000, 1))
    b = dfr_from_synthetic(model, np.ones(60), np.ones(60), nbe_sample(gen, 1000, 2))
    assert abs(a.df_r - b.df_r) < 3 * np.hypot(a.df_r_se, b.df_r_se)


def test_joint_demo_reports_inflated_risk():
    rows = demo_rows(seed=0)
    X = rows[:, :-1]
    rep = joint_synthesis_demo(rows, "cart", B=2000, seed=1, repeats=2)
    assert rep.truth == pytest.approx(1 + np.trace(np.linalg.inv(X.T @ X)))
    assert rep.mean > 2 * rep.truth
    assert rep.note == "not for risk estimation"
    with pytest.raises(ValueError):
        synthesize(rows, "bn")


def test_synthetic_csv_provenance(tmp_path):
    rows = np.arange(6.0).reshape(3, 2)
    path = tmp_path / "s.csv"
    write_synthetic_csv(path, rows, ["a", "b"], "nbe", 5, source_hash(rows))
    lines = path.read_text().splitlines()
    assert lines[:4] == ["# method=nbe", "# seed=5", "# B=3", f"# source_hash={source_hash(rows)}"]
    assert lines[4] == "a,b"
    assert source_hash(rows) != source_hash(rows + 1)
