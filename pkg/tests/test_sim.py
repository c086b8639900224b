import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from batchaipw.learners import ClassifierSpec
from batchaipw.nuisance import NuisanceSpecs
from batchaipw.sim import (ADAPTIVE_AIPW, ADAPTIVE_RZ, SKYLINE, UNIFORM, DgpSpec, TrialMetrics,
                           budget_saved, generate, run_trials)


def test_zero_effect_has_mean_near_zero():
    # independent noise in each arm: the sample mean of Y(1)-Y(0) is zero only in expectation
    spec = DgpSpec(n=200_000, theta0=0.0)
    _, sealed = generate(spec, seed=0)
    sd = sealed.effects().std()
    assert abs(sealed.sample_ate()) < 4 * sd / math.sqrt(spec.n)


def test_large_sample_ate():
    _, sealed = generate(DgpSpec(n=1_000_000), seed=1)
    assert abs(sealed.sample_ate() - 3.0) < 0.02


def test_control_noise_variance_at_x3_zero():
    spec = DgpSpec(n=400_000)
    rng = np.random.default_rng(2)
    X = rng.standard_normal((spec.n, spec.d))
    X[:, 2] = 0.0
    assert np.allclose(spec.sigma2(0, X), 3.8)
    ds, sealed = generate(spec, seed=2)
    # observed control outcomes in a thin slice around X3 = 0
    seen = sealed.reveal(ds.ids)
    resid = np.array([seen[i] for i in ds.ids]) - spec.base_outcome(ds.X)
    ctrl = (ds.arm == 0) & (np.abs(ds.X[:, 2]) < 0.02)
    assert resid[ctrl].var(ddof=1) == pytest.approx(3.8, rel=0.05)


def test_propensity_and_variance_functions():
    spec = DgpSpec()
    X = np.zeros((1, 5))
    assert spec.propensity(X)[0] == pytest.approx(1 / (1 + math.exp(0.5)))
    assert spec.sigma2(1, X)[0] == pytest.approx(1.3)
    assert spec.sigma2(0, X)[0] == pytest.approx(3.8)


def test_additive_coupling_option():
    spec = DgpSpec(n=50_000, outcome_coupling="additive")
    ds, sealed = generate(spec, seed=3)
    eff = sealed.effects() - spec.theta0
    # Y(1) - Y(0) is the arm-1 noise alone
    assert eff.var() == pytest.approx(np.mean(spec.sigma2(1, ds.X)), rel=0.05)


def test_full_budget_methods_agree():
    # the rz score fits its own classifier; with the propensity's clip bounds it is the same fit
    specs = NuisanceSpecs(rz=ClassifierSpec())
    m = run_trials([1.0], trials=2, dgp=DgpSpec(n=300), seed=1, specs=specs)
    for t in range(2):
        vals = {r["method"]: r["tau_hat"] for r in m.rows if r["trial"] == t}
        assert len(set(vals.values())) == 1
        assert all(r["realized_fraction"] == 1.0 for r in m.rows)


def test_single_trial_aggregate_is_raw():
    m = run_trials([0.3], methods=[UNIFORM], trials=1, dgp=DgpSpec(n=300), seed=2)
    (row,) = m.rows
    (agg,) = m.aggregate()
    assert agg["mse"] == row["sq_error"]
    assert agg["mean_ci_width"] == row["ci_width"]
    assert agg["coverage"] == float(row["covered"])


def test_reproducible(tmp_path):
    kw = dict(budgets=[0.2], methods=[ADAPTIVE_AIPW, UNIFORM], trials=2, dgp=DgpSpec(n=300), seed=3)
    a, b = run_trials(**kw), run_trials(**kw)
    a.write_long(tmp_path / "a.csv")
    b.write_long(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert run_trials(**kw, workers=2).rows == a.rows


def test_failures_are_recorded():
    # 12 units cannot be split into 5 folds of both batches with labels in each arm
    m = run_trials([0.1], methods=[UNIFORM], trials=1, dgp=DgpSpec(n=12), seed=0)
    (row,) = m.rows
    assert row["failed"] and row["error"]
    assert m.aggregate()[0]["failed"] == 1


def _curve(widths: dict) -> TrialMetrics:
    m = TrialMetrics(truth=0.0)
    for (method, b), w in widths.items():
        m.add(method, b, 0, 0.0, (-w / 2, w / 2), b)
    return m


def test_budget_saved_identical_curves():
    grid = [0.1, 0.2, 0.3, 0.4]
    m = _curve({**{(UNIFORM, b): 1 / math.sqrt(b) for b in grid},
                **{(ADAPTIVE_AIPW, b): 1 / math.sqrt(b) for b in grid}})
    assert all(s.savings == 0.0 for s in budget_saved(m).values())


def test_budget_saved_inverts_analytic_curve():
    grid = [0.25, 0.5, 0.75]
    m = _curve({**{(UNIFORM, b): 1 / math.sqrt(b) for b in grid},
                (ADAPTIVE_AIPW, 0.25): 1 / math.sqrt(0.5)})
    s = budget_saved(m)[0.25]
    assert s.equivalent_uniform_budget == pytest.approx(0.5, abs=1e-12)
    assert s.savings == pytest.approx(0.5, abs=1e-12)


def test_budget_saved_clamps_when_wider():
    m = _curve({(UNIFORM, 0.2): 1.0, (UNIFORM, 0.4): 0.8, (ADAPTIVE_AIPW, 0.2): 1.2})
    assert budget_saved(m)[0.2].savings == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 0.9), st.floats(0.5, 3.0))
def test_budget_saved_bounded(b, scale):
    grid = [0.1, 0.3, 0.5, 0.7, 0.9]
    widths = {(UNIFORM, g): 1 / math.sqrt(g) for g in grid}
    widths[(ADAPTIVE_AIPW, round(b, 6))] = scale / math.sqrt(b)
    for s in budget_saved(_curve(widths)).values():
        assert 0.0 <= s.savings < 1.0
