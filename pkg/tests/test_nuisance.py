import numpy as np
import pytest

from batchaipw.data import CONTINUOUS
from batchaipw.learners import RegressorSpec
from batchaipw.nuisance import (NuisanceError, NuisanceSpecs, fit_continuous_nuisances,
                                fit_nuisances, fit_outcome_models, fit_propensity, fit_rz_score,
                                fit_variance_models)

from conftest import make_dataset


def test_propensity_complements_and_clips(linear_data):
    prop = fit_propensity(linear_data)
    e1, e0 = prop.e(1, linear_data.X), prop.e(0, linear_data.X)
    np.testing.assert_allclose(e1 + e0, 1.0)
    assert e1.min() >= 0.02 and e1.max() <= 0.98


def test_single_arm_propensity_fails():
    ds = make_dataset(np.zeros((5, 1)), np.ones(5))
    with pytest.raises(NuisanceError):
        fit_propensity(ds)


def test_outcome_needs_labels_in_both_arms():
    ds = make_dataset(np.arange(4.0)[:, None], [0, 0, 1, 1], [1, 2, 3, 4], r=[1, 1, 0, 0])
    with pytest.raises(NuisanceError, match="arm 1"):
        fit_outcome_models(ds, RegressorSpec())


def test_variance_model_floor():
    # exact linear outcomes give zero residuals, so the floor binds
    X = np.arange(10.0)[:, None]
    z = np.array([0, 1] * 5)
    ds = make_dataset(X, z, 1 + X[:, 0] + z)
    mu = fit_outcome_models(ds, RegressorSpec("ridge", ridge_alpha=0.0))
    s2 = fit_variance_models(ds, mu, RegressorSpec(), floor=0.05)
    assert np.all(s2[0].predict(X) == 0.05)


def test_variance_recovers_heteroskedasticity():
    rng = np.random.default_rng(0)
    n = 4000
    X = rng.uniform(0, 1, (n, 1))
    z = rng.integers(0, 2, n).astype(float)
    sd = np.where(z == 1, 1 + 2 * X[:, 0], 0.5)
    ds = make_dataset(X, z, rng.standard_normal(n) * sd)
    spec = NuisanceSpecs(variance=RegressorSpec("ridge", ridge_alpha=0.0))
    nuis = fit_nuisances(ds, spec)
    grid = np.array([[0.1], [0.9]])
    s1 = nuis.sigma2_hat(1, grid)
    assert s1[1] > 2 * s1[0]
    assert abs(np.mean(nuis.sigma2_hat(0, grid)) - 0.25) < 0.05


def test_rz_scores_sum_at_most_one(linear_data):
    ds = linear_data.subset(np.arange(300))
    rz = fit_rz_score(ds)
    q1, q0 = rz.both(ds.X)
    assert np.all(q1 + q0 <= 1 + 1e-12)
    assert q1.min() >= 0.01 / 2


def test_nuisance_set_prediction_keys(linear_data):
    nuis = fit_nuisances(linear_data, with_rz=True)
    p = nuis.predict(linear_data)
    assert set(p) == {"mu1", "mu0", "s1", "s0", "e1", "q1", "q0"}
    assert np.all(p["s1"] > 0)


def test_context_ensemble_uses_context():
    rng = np.random.default_rng(4)
    n = 600
    X = rng.standard_normal((n, 2))
    C = rng.standard_normal((n, 1))
    z = rng.integers(0, 2, n).astype(float)
    y = X[:, 0] + 3 * C[:, 0] + rng.standard_normal(n) * 0.1
    ds = make_dataset(X, z, y, C=C)
    specs = NuisanceSpecs(use_context=True, ensemble_context=True)
    nuis = fit_nuisances(ds, specs)
    assert nuis.mu[1].weight == 1.0
    assert np.mean((nuis.mu_hat(1, X, C) - y) ** 2) < 0.05


def test_specs_round_trip():
    s = NuisanceSpecs(variance=RegressorSpec("knn", k=7), use_context=True)
    assert NuisanceSpecs.from_dict(s.to_dict()) == s


def test_continuous_nuisances():
    rng = np.random.default_rng(8)
    n = 800
    X = rng.standard_normal((n, 2))
    z = 0.5 * X[:, 0] + rng.standard_normal(n)
    y = X[:, 1] + z + rng.standard_normal(n)
    ds = make_dataset(X, z, y, mode=CONTINUOUS)
    cn = fit_continuous_nuisances(ds)
    assert abs(cn.dose.scale - 1.0) < 0.1
    dens = cn.e(np.zeros(n), X)
    assert np.all(dens > 0)
