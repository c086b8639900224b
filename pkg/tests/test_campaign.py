import json

import numpy as np
import pytest

from batchaipw.campaign import (BATCH1_LABELED, BATCH1_REQUESTED, BATCH2_LABELED, FINALIZED, PLANNED,
                                AwaitingLabels, Campaign, CampaignConfig, CampaignState, FileOracle,
                                OracleError, PhaseError, SimulationOracle)
from batchaipw.data import BudgetSpec, DataError
from batchaipw.estimator import RZ
from batchaipw.learners import ClassifierSpec
from batchaipw.nuisance import NuisanceSpecs
from batchaipw.sim import DgpSpec, SealedOutcomes, generate


def _start(n=400, B=0.3, seed=0, data_seed=0, **cfg):
    ds, sealed = generate(DgpSpec(n=n), seed=data_seed)
    config = CampaignConfig(BudgetSpec(B=B), **cfg)
    return Campaign.start(ds, config, SimulationOracle(sealed), seed), ds, sealed


class ConstantOracle:
    def __init__(self, value):
        self.value = value

    def request(self, ids):
        pass

    def collect(self, ids):
        return {int(i): self.value for i in ids}


def test_full_budget_requests_all_of_batch1():
    camp, ds, _ = _start(B=1.0)
    ids = camp.step_batch1()
    assert sorted(ids) == sorted(int(i) for i in ds.ids[camp.assignment.batch == 1])


def test_batch1_count_is_binomial():
    # n1 = 550 at kappa 0.55; request count ~ Binomial(550, 0.3), mean 165, sd ~ 10.7
    ds, sealed = generate(DgpSpec(n=1000), seed=0)
    counts = []
    for s in range(200):
        camp = Campaign.start(ds, CampaignConfig(BudgetSpec(B=0.3)), SimulationOracle(sealed), s)
        assert camp.assignment.n1 == 550
        counts.append(len(camp.step_batch1()))
    # standard error of the mean over 200 seeds is ~0.76
    assert abs(np.mean(counts) - 165) < 3 * np.sqrt(550 * 0.21 / 200)


def test_same_seed_same_requests():
    a, _, _ = _start(seed=5)
    b, _, _ = _start(seed=5)
    c, _, _ = _start(seed=6)
    assert a.step_batch1() == b.step_batch1()
    assert a.state.requested != c.step_batch1()


def test_phase_errors():
    camp, _, _ = _start()
    with pytest.raises(PhaseError):
        camp.step_plan()
    with pytest.raises(PhaseError):
        camp.collect()
    camp.step_batch1()
    with pytest.raises(PhaseError):
        camp.step_batch1()
    with pytest.raises(PhaseError):
        camp.finalize()


def test_uniform_planner_gives_batch2_at_budget():
    camp, _, _ = _start(planner="uniform")
    camp.run(PLANNED)
    pi2 = [v for v in camp.state.plan["pi2"] if v is not None]
    np.testing.assert_allclose(pi2, 0.3, atol=1e-12)
    np.testing.assert_allclose(camp.state.plan["pi_mix"], 0.3, atol=1e-12)


def test_constant_nuisances_give_budget_probability():
    # constant outcomes flatten mu and sigma2; a saturating slope penalty flattens
    # the propensity, so pi* is constant within each (fold, arm) and averages to B
    ds, _ = generate(DgpSpec(n=400), seed=1)
    specs = NuisanceSpecs(propensity=ClassifierSpec(l2=1e12))
    camp = Campaign.start(ds, CampaignConfig(BudgetSpec(B=0.3), specs=specs), ConstantOracle(2.0), 0)
    camp.run(PLANNED)
    b2 = camp.assignment.batch == 2
    pi2 = np.array([np.nan if v is None else v for v in camp.state.plan["pi2"]])
    assert abs(np.mean(pi2[b2]) - 0.3) < 1e-9
    for k in range(1, 6):
        for a in (0, 1):
            cell = pi2[b2 & (camp.assignment.fold == k) & (ds.arm == a)]
            assert np.ptp(cell) < 1e-6


def test_constant_oracle_gives_zero_effect():
    ds, _ = generate(DgpSpec(n=300), seed=2)
    camp = Campaign.start(ds, CampaignConfig(BudgetSpec(B=0.4), estimators=("aipw", "rz")),
                          ConstantOracle(1.5), 0)
    camp.run()
    for rep in camp.reports().values():
        assert abs(rep.tau_hat) < 1e-9


def test_higher_variance_arm_gets_more_annotation():
    camp, ds, _ = _start(n=2000, B=0.3)
    camp.run(PLANNED)
    pi_star = np.asarray(camp.state.plan["pi_star"])
    b2 = camp.assignment.batch == 2
    arm0 = pi_star[b2 & (ds.arm == 0)].mean()
    arm1 = pi_star[b2 & (ds.arm == 1)].mean()
    assert arm0 > arm1


@pytest.mark.parametrize("budget", [BudgetSpec(B=0.2), BudgetSpec("per-arm", B0=0.3, B1=0.15)])
def test_budget_audit(budget):
    ds, sealed = generate(DgpSpec(n=600), seed=3)
    camp = Campaign.start(ds, CampaignConfig(budget), SimulationOracle(sealed), 1)
    camp.run(PLANNED)
    audit = camp.state.plan["audit"]
    assert audit["budget_ok"]
    if budget.kind == "global":
        assert audit["expected_fraction"] <= 0.2 + 1e-9
    else:
        assert audit["expected_fraction_arm0"] <= 0.3 + 1e-9
        assert audit["expected_fraction_arm1"] <= 0.15 + 1e-9
    pi2 = [v for v in camp.state.plan["pi2"] if v is not None]
    assert min(pi2) >= 0 and max(pi2) <= 1


def test_state_json_round_trip(tmp_path):
    camp, _, _ = _start()
    camp.run(PLANNED)
    path = tmp_path / "c.json"
    camp.save(path)
    back = CampaignState.load(path)
    assert back == camp.state
    assert json.loads(back.to_json()) == json.loads(camp.state.to_json())


def test_kill_restart_replay(tmp_path):
    ref, ds, sealed = _start(seed=4, estimators=("aipw", "rz"))
    ref.run()
    path = tmp_path / "c.json"
    camp = Campaign.start(ds, CampaignConfig(BudgetSpec(B=0.3), estimators=("aipw", "rz")),
                          SimulationOracle(sealed), 4)
    while camp.phase != FINALIZED:
        camp.advance()
        camp.save(path)
        oracle = SimulationOracle(sealed)
        oracle.requested.update(i for ids in camp.state.requested.values() for i in ids)
        camp = Campaign.resume(path, ds, oracle)
    assert camp.state.reports == ref.state.reports
    assert camp.state.plan == ref.state.plan


def test_plan_ignores_unrevealed_outcomes():
    camp, ds, sealed = _start(seed=2)
    camp.run(BATCH1_LABELED)
    keep = camp.state.requested["1"]
    other = sealed.permuted(np.random.default_rng(0), keep=keep)
    twin = Campaign.start(ds, camp.config, SimulationOracle(other), 2)
    twin.run(PLANNED)
    camp.step_plan()
    assert twin.state.plan == camp.state.plan
    assert twin.step_batch2() == camp.step_batch2()


def test_resume_rejects_other_dataset(tmp_path):
    camp, _, sealed = _start()
    camp.save(tmp_path / "c.json")
    other, _ = generate(DgpSpec(n=400), seed=99)
    with pytest.raises(DataError):
        Campaign.resume(tmp_path / "c.json", other, SimulationOracle(sealed))


def test_simulation_oracle_refuses_unrequested_ids():
    _, sealed = generate(DgpSpec(n=10), seed=0)
    oracle = SimulationOracle(sealed)
    oracle.request([1, 2])
    assert set(oracle.collect([1, 2])) == {1, 2}
    with pytest.raises(OracleError):
        oracle.collect([3])


def test_file_oracle_waits_for_labels(tmp_path):
    ds, sealed = generate(DgpSpec(n=200), seed=0)
    camp = Campaign.start(ds, CampaignConfig(BudgetSpec(B=0.3)), FileOracle(tmp_path), 0)
    camp.advance()
    assert camp.phase == BATCH1_REQUESTED
    with pytest.raises(AwaitingLabels):
        camp.advance()
    ids = [int(line) for line in (tmp_path / "requests.csv").read_text().split()[1:]]
    assert ids == camp.state.requested["1"]
    partial = sealed.reveal(ids[:-1])
    (tmp_path / "labels.csv").write_text("id,y\n" + "".join(f"{i},{v!r}\n" for i, v in partial.items()))
    assert camp.collect() is False
    labels = sealed.reveal(ids)
    (tmp_path / "labels.csv").write_text("id,y\n" + "".join(f"{i},{v!r}\n" for i, v in labels.items()))
    assert camp.collect() is True
    assert camp.phase == BATCH1_LABELED


def test_per_arm_reoptimized_runs_to_completion():
    ds, sealed = generate(DgpSpec(n=500), seed=5)
    cfg = CampaignConfig(BudgetSpec("per-arm", B0=0.4, B1=0.2), score_pi="reoptimized",
                         estimators=("aipw", RZ))
    camp = Campaign.start(ds, cfg, SimulationOracle(sealed), 0)
    camp.run()
    assert camp.phase == FINALIZED
    assert set(camp.reports()) == {"aipw", "rz"}


def test_config_validation():
    with pytest.raises(ValueError):
        CampaignConfig(BudgetSpec("continuous-local", B=0.3, z0=0.0, h=1.0))
    with pytest.raises(ValueError):
        CampaignConfig(BudgetSpec(B=0.3), planner="greedy")
    cfg = CampaignConfig(BudgetSpec(B=0.3), estimators=("aipw", "rz"))
    assert CampaignConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
