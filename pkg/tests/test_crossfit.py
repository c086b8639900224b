import numpy as np
import pytest

from batchaipw.crossfit import FINAL, PLANNING, BatchFoldAssignment, assign, fit_folded, training_rows
from batchaipw.sim import DgpSpec, generate


def test_assignment_sizes_and_balance():
    a = assign(1000, 5, 0.55, seed=1)
    assert a.n1 == 550
    for b in (1, 2):
        counts = np.bincount(a.fold[a.batch == b])[1:]
        assert counts.max() - counts.min() <= 1


def test_assignment_is_deterministic_and_serializable(tmp_path):
    a = assign(101, 3, 0.4, seed=9)
    assert a.equals(assign(101, 3, 0.4, seed=9))
    assert not a.equals(assign(101, 3, 0.4, seed=10))
    assert BatchFoldAssignment.from_dict(a.to_dict()).equals(a)
    a.to_csv(tmp_path / "a.csv", np.arange(101))
    assert (tmp_path / "a.csv").read_text().count("\n") == 102


def test_stratified_assignment_balances_arms():
    strata = np.r_[np.zeros(300), np.ones(100)]
    a = assign(400, 4, 0.5, seed=3, strata=strata)
    assert np.sum((a.batch == 1) & (strata == 1)) == 50


def test_too_small():
    with pytest.raises(ValueError):
        assign(7, 4, 0.5, seed=0)


def test_training_rows_exclude_own_fold():
    a = assign(60, 3, 0.5, seed=0)
    for k in (1, 2, 3):
        plan_rows = training_rows(a, k, PLANNING)
        final_rows = training_rows(a, k, FINAL)
        assert np.all(a.fold[plan_rows] != k) and np.all(a.batch[plan_rows] == 1)
        assert np.all(a.fold[final_rows] != k)
        assert set(plan_rows) < set(final_rows)


def test_out_of_fold_predictions_use_other_folds():
    ds, sealed = generate(DgpSpec(n=300), seed=0)
    ds = ds.with_labels(sealed.reveal(ds.ids))
    a = assign(ds.n, 3, 0.5, seed=0)
    folded = fit_folded(ds, a, FINAL, seed=0)
    p = folded.predict(ds)
    k1 = a.fold == 1
    direct = folded.model_for(1).predict(ds.subset(np.flatnonzero(k1)))
    np.testing.assert_array_equal(p["mu1"][k1], direct["mu1"])
    assert not np.array_equal(folded.model_for(1).predict(ds)["mu1"], folded.model_for(2).predict(ds)["mu1"])
