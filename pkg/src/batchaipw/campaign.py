"""The two-batch annotation protocol as a resumable state machine.

A campaign starts from covariates and treatments only. Batch 1 is annotated
uniformly at the budget rate; nuisances fitted on those labels (out of fold)
give variance-optimal probabilities for batch 2; after batch 2 the pooled
labels are used for the final cross-fitted estimate.

Every random draw comes from a generator keyed on ``(seed, step)``, so a
campaign reloaded from its JSON state continues exactly as an uninterrupted
run would.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .crossfit import FINAL, PLANNING, BatchFoldAssignment, assign, fit_folded
from .data import BINARY, BudgetSpec, DataError, Dataset
from .design import (BUDGET_RTOL, DesignError, batch2_probability, feasible_box,
                     global_allocation, per_arm_allocation)
from .estimator import AIPW, RZ, EstimateReport, estimate_ate
from .nuisance import NuisanceSpecs

log = logging.getLogger(__name__)

INITIALIZED = "initialized"
BATCH1_REQUESTED = "batch1-requested"
BATCH1_LABELED = "batch1-labeled"
PLANNED = "planned"
BATCH2_REQUESTED = "batch2-requested"
BATCH2_LABELED = "batch2-labeled"
FINALIZED = "finalized"
PHASES = (INITIALIZED, BATCH1_REQUESTED, BATCH1_LABELED, PLANNED,
          BATCH2_REQUESTED, BATCH2_LABELED, FINALIZED)

_STEP_TAGS = {"batch1": 1, "plan": 2, "batch2": 3, "final": 4}

REQUESTS_FILE = "requests.csv"
LABELS_FILE = "labels.csv"
STATE_FILE = "campaign.json"


class PhaseError(RuntimeError):
    """An operation was attempted in the wrong campaign phase."""


class AwaitingLabels(RuntimeError):
    """The oracle has not delivered labels for the outstanding request yet."""


class OracleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# oracles


class AnnotationOracle(Protocol):
    def request(self, ids: list[int]) -> None: ...

    def collect(self, ids: list[int]) -> dict[int, float] | None: ...


class SimulationOracle:
    """Reveals outcomes from a sealed table, for requested ids only."""

    def __init__(self, sealed):
        self._sealed = sealed
        self.requested: set[int] = set()

    def request(self, ids):
        self.requested.update(int(i) for i in ids)

    def collect(self, ids):
        missing = [i for i in ids if int(i) not in self.requested]
        if missing:
            raise OracleError(f"labels asked for ids that were never requested: {missing[:5]}")
        return self._sealed.reveal(ids)


class FileOracle:
    """Hands requests to people through files in ``workdir``.

    ``request`` writes ``requests.csv`` (column ``id``); ``collect`` reads
    ``labels.csv`` (columns ``id``, ``y``) and returns None until every
    requested id has a label there.
    """

    def __init__(self, workdir):
        self.workdir = Path(workdir)

    @property
    def requests_path(self) -> Path:
        return self.workdir / REQUESTS_FILE

    @property
    def labels_path(self) -> Path:
        return self.workdir / LABELS_FILE

    def request(self, ids):
        self.workdir.mkdir(parents=True, exist_ok=True)
        with self.requests_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"])
            for i in ids:
                w.writerow([int(i)])

    def collect(self, ids):
        if not ids:
            return {}
        if not self.labels_path.exists():
            return None
        labels = {}
        with self.labels_path.open(newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    labels[int(row["id"])] = float(row["y"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise OracleError(f"{self.labels_path}: row {lineno}: {exc}") from None
        want = [int(i) for i in ids]
        if any(i not in labels for i in want):
            return None
        return {i: labels[i] for i in want}


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class CampaignConfig:
    budget: BudgetSpec
    kappa: float = 0.55
    folds: int = 5
    alpha: float = 0.05
    planner: str = "adaptive"  # or "uniform"
    estimators: tuple[str, ...] = (AIPW,)
    score_pi: str = "design"  # or "reoptimized"
    pi_floor: float = 0.01
    weight_cap: float | None = None
    stratify: bool = False
    specs: NuisanceSpecs = NuisanceSpecs()

    def __post_init__(self):
        if self.budget.kind == "continuous-local":
            raise ValueError("campaigns support global and per-arm budgets only")
        if self.planner not in ("adaptive", "uniform"):
            raise ValueError(f"unknown planner {self.planner!r}")
        if self.score_pi not in ("design", "reoptimized"):
            raise ValueError(f"unknown score_pi {self.score_pi!r}")
        if not self.estimators or any(k not in (AIPW, RZ) for k in self.estimators):
            raise ValueError("estimators must be a non-empty subset of ('aipw', 'rz')")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        d = dict(d)
        d["budget"] = BudgetSpec(**d["budget"])
        d["specs"] = NuisanceSpecs.from_dict(d["specs"])
        d["estimators"] = tuple(d["estimators"])
        return cls(**d)


@dataclass
class CampaignState:
    phase: str
    seed: int
    config: dict
    dataset_hash: str
    ids: list[int]
    assignment: dict
    requested: dict[str, list[int]] = field(default_factory=dict)
    labels: dict[int, float] = field(default_factory=dict)
    plan: dict | None = None
    fingerprints: dict[str, str] = field(default_factory=dict)
    reports: dict[str, dict] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    dataset_ref: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["labels"] = [[int(k), float(v)] for k, v in sorted(self.labels.items())]
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CampaignState":
        d = json.loads(text)
        d["labels"] = {int(k): float(v) for k, v in d["labels"]}
        return cls(**d)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.to_json())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "CampaignState":
        return cls.from_json(Path(path).read_text())


def _fingerprint(rows: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(rows):
        h.update(str(k).encode())
        h.update(np.asarray(rows[k], dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def _derived_seed(seed: int, tag: str) -> int:
    return int(np.random.SeedSequence([seed, _STEP_TAGS[tag]]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# the campaign


class Campaign:
    """Drive one campaign over ``ds`` (covariates and treatments; outcomes are ignored)."""

    def __init__(self, ds: Dataset, state: CampaignState, oracle: AnnotationOracle):
        if ds.mode != BINARY:
            raise DataError("campaigns need a binary-treatment dataset")
        if ds.fingerprint() != state.dataset_hash:
            raise DataError("dataset does not match the campaign state (hash mismatch)")
        if [int(i) for i in ds.ids] != state.ids:
            raise DataError("dataset ids or order differ from the campaign state")
        self._base = ds.redacted()
        self.state = state
        self.oracle = oracle
        self.config = CampaignConfig.from_dict(state.config)
        self.assignment = BatchFoldAssignment.from_dict(state.assignment)
        self.final_nuisances = None

    @classmethod
    def start(cls, ds: Dataset, config: CampaignConfig, oracle: AnnotationOracle, seed: int) -> "Campaign":
        strata = ds.arm if config.stratify else None
        asg = assign(ds.n, config.folds, config.kappa, seed, strata)
        state = CampaignState(
            phase=INITIALIZED, seed=int(seed), config=config.to_dict(),
            dataset_hash=ds.fingerprint(), ids=[int(i) for i in ds.ids],
            assignment=asg.to_dict(),
        )
        state.log.append({"from": None, "to": INITIALIZED, "note": f"n={ds.n}"})
        return cls(ds, state, oracle)

    # -- helpers -----------------------------------------------------------

    @property
    def phase(self) -> str:
        return self.state.phase

    def _require(self, phase: str):
        if self.state.phase != phase:
            raise PhaseError(f"expected phase {phase!r}, campaign is at {self.state.phase!r}")

    def _advance(self, to: str, note: str = ""):
        frm = self.state.phase
        if PHASES.index(to) != PHASES.index(frm) + 1:
            raise PhaseError(f"illegal transition {frm} -> {to}")
        self.state.phase = to
        self.state.log.append({"from": frm, "to": to, "note": note})

    def _rng(self, tag: str) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.state.seed, _STEP_TAGS[tag]]))

    def observed(self) -> Dataset:
        """The dataset with exactly the outcomes revealed so far."""
        return self._base.with_labels(self.state.labels)

    def _pi1(self) -> np.ndarray:
        """Designed batch-1 probability for each unit's arm."""
        b = self.config.budget
        return np.where(self._base.arm == 1, b.arm_budget(1), b.arm_budget(0))

    # -- transitions -------------------------------------------------------

    def step_batch1(self) -> list[int]:
        self._require(INITIALIZED)
        b1 = self.assignment.batch == 1
        draw = self._rng("batch1").random(self._base.n) < self._pi1()
        ids = [int(i) for i in self._base.ids[b1 & draw]]
        self.oracle.request(ids)
        self.state.requested["1"] = ids
        self._advance(BATCH1_REQUESTED, f"{len(ids)} of {int(b1.sum())} batch-1 units requested")
        return ids

    def collect(self) -> bool:
        """Ingest labels for the outstanding request; False if they are not ready."""
        if self.state.phase == BATCH1_REQUESTED:
            key, nxt = "1", BATCH1_LABELED
        elif self.state.phase == BATCH2_REQUESTED:
            key, nxt = "2", BATCH2_LABELED
        else:
            raise PhaseError(f"no outstanding request in phase {self.state.phase!r}")
        ids = self.state.requested[key]
        got = self.oracle.collect(ids)
        if got is None:
            return False
        if set(int(i) for i in got) != set(ids):
            raise OracleError("oracle returned labels for a different id set")
        for i in ids:
            val = float(got[i])
            if not np.isfinite(val):
                raise OracleError(f"non-finite label for id {i}")
            if i in self.state.labels and self.state.labels[i] != val:
                raise OracleError(f"label for id {i} changed between requests")
            self.state.labels[i] = val
        self._advance(nxt, f"{len(ids)} labels ingested")
        return True

    def step_plan(self) -> dict:
        self._require(BATCH1_LABELED)
        cfg = self.config
        ds = self.observed()
        asg = self.assignment
        kappa = asg.realized_kappa
        pi1 = self._pi1()
        z = ds.arm
        b2 = asg.batch == 2
        pi_star = np.empty(ds.n)
        pi_star_free = np.empty(ds.n)
        notes = {}
        if cfg.planner == "uniform":
            pi_star[:] = pi1
            pi_star_free[:] = pi1
        else:
            folded = fit_folded(ds, asg, PLANNING, cfg.specs, _derived_seed(self.state.seed, "plan"))
            self.state.fingerprints["planning"] = _fingerprint(folded.train_index)
            for k, model in folded.models.items():
                rows = np.flatnonzero(asg.fold == k)
                p = model.predict(ds.subset(rows))
                mask = b2[rows]
                pi_star[rows], pi_star_free[rows] = self._allocate(p, z[rows], mask, kappa)
        pi2_all, feasible = batch2_probability(pi_star, kappa, pi1)
        pi2 = np.where(b2, pi2_all, np.nan)
        unconstrained_ok = (pi_star_free >= kappa * pi1 - 1e-12) & (
            pi_star_free <= kappa * pi1 + (1 - kappa) + 1e-12)
        actual = np.where(b2, pi2_all, pi1)
        # every unit's known probability under the two-batch mixture
        mix = kappa * pi1 + (1 - kappa) * pi2_all
        audit = self._budget_audit(actual)
        notes.update(audit)
        notes["infeasible_fraction"] = float(np.mean(~unconstrained_ok[b2])) if b2.any() else 0.0
        notes["clamped_fraction"] = float(np.mean(~feasible[b2])) if b2.any() else 0.0
        self.state.plan = {
            "kappa": kappa,
            "pi1": pi1.tolist(),
            "pi_star": pi_star.tolist(),
            "pi2": [None if not np.isfinite(v) else float(v) for v in pi2],
            "pi_mix": mix.tolist(),
            "audit": notes,
        }
        self._advance(PLANNED, f"expected fraction {audit['expected_fraction']:.6f}")
        return self.state.plan

    def _allocate(self, p: dict, z: np.ndarray, mask: np.ndarray, kappa: float):
        """pi* for one fold, constrained to what the batch mixture can reach.

        Returns the constrained allocation and, for the infeasibility audit,
        the allocation with only the [pi_floor, 1] box.
        """
        cfg = self.config
        b = cfg.budget
        if not mask.any():
            fill = np.where(z == 1, b.arm_budget(1), b.arm_budget(0))
            return fill, fill
        if b.kind == "global":
            lo, hi = feasible_box(kappa, b.B, cfg.pi_floor, 1.0)
            sol = global_allocation(p["s1"], p["s0"], p["e1"], z, b.B, lo, hi, mask=mask)
            free = global_allocation(p["s1"], p["s0"], p["e1"], z, b.B, cfg.pi_floor, 1.0, mask=mask)
            return sol.realized, free.realized
        bounds = {a: feasible_box(kappa, b.arm_budget(a), cfg.pi_floor, 1.0) for a in (0, 1)}
        out = []
        for bnds in (bounds, None):
            try:
                sol = per_arm_allocation(p["s1"], p["s0"], p["e1"], z, b.B0, b.B1,
                                         cfg.pi_floor, 1.0, mask=mask, bounds=bnds)
                out.append(sol.realized)
            except DesignError:
                # an arm missing from this fold's batch 2: its units keep pi1
                out.append(np.where(z == 1, b.arm_budget(1), b.arm_budget(0)))
        return out[0], out[1]

    def _budget_audit(self, actual: np.ndarray) -> dict:
        b = self.config.budget
        z = self._base.arm
        audit = {"expected_fraction": float(actual.mean())}
        if b.kind == "global":
            audit["budget_ok"] = bool(audit["expected_fraction"] <= b.B * (1 + BUDGET_RTOL))
            audit["shortfall"] = float(b.B - audit["expected_fraction"])
        else:
            ok = True
            for a in (0, 1):
                frac = float(actual[z == a].mean()) if np.any(z == a) else 0.0
                audit[f"expected_fraction_arm{a}"] = frac
                ok &= frac <= b.arm_budget(a) * (1 + BUDGET_RTOL)
            audit["budget_ok"] = bool(ok)
        if not audit["budget_ok"]:
            log.warning("plan exceeds budget: %s", audit)
        return audit

    def step_batch2(self) -> list[int]:
        self._require(PLANNED)
        b2 = self.assignment.batch == 2
        pi2 = np.array([np.nan if v is None else v for v in self.state.plan["pi2"]], dtype=float)
        u = self._rng("batch2").random(self._base.n)
        draw = b2 & (u < np.where(b2, pi2, 0.0))
        ids = [int(i) for i in self._base.ids[draw]]
        self.oracle.request(ids)
        self.state.requested["2"] = ids
        self._advance(BATCH2_REQUESTED, f"{len(ids)} of {int(b2.sum())} batch-2 units requested")
        return ids

    def finalize(self) -> EstimateReport:
        self._require(BATCH2_LABELED)
        cfg = self.config
        ds = self.observed()
        folded = fit_folded(ds, self.assignment, FINAL, cfg.specs,
                            _derived_seed(self.state.seed, "final"), with_rz=RZ in cfg.estimators)
        self.state.fingerprints["final"] = _fingerprint(folded.train_index)
        self.final_nuisances = folded  # in memory only, for diagnostics
        pi = np.asarray(self.state.plan["pi_mix"], dtype=float)
        if cfg.score_pi == "reoptimized" and cfg.planner == "adaptive":
            pi = self._reoptimized_pi(ds, folded)
        extra = {
            "seed": self.state.seed, "config": self.state.config,
            "realized_fraction": float(ds.r.mean()),
            "planner": cfg.planner,
        }
        reports = {}
        for kind in cfg.estimators:
            reports[kind] = estimate_ate(ds, folded, pi, kind, cfg.alpha, cfg.weight_cap,
                                         (cfg.specs.propensity.clip_lo, cfg.specs.propensity.clip_hi),
                                         extra=extra)
        self.state.reports = {k: r.to_dict() for k, r in reports.items()}
        first = reports[cfg.estimators[0]]
        self._advance(FINALIZED, f"tau_hat={first.tau_hat:.6g}")
        return first

    def _reoptimized_pi(self, ds: Dataset, folded) -> np.ndarray:
        b = self.config.budget
        pi = np.empty(ds.n)
        for k, model in folded.models.items():
            rows = np.flatnonzero(self.assignment.fold == k)
            p = model.predict(ds.subset(rows))
            z = ds.arm[rows]
            if b.kind == "global":
                sol = global_allocation(p["s1"], p["s0"], p["e1"], z, b.B, self.config.pi_floor)
            else:
                sol = per_arm_allocation(p["s1"], p["s0"], p["e1"], z, b.B0, b.B1, self.config.pi_floor)
            pi[rows] = sol.realized
        return pi

    # -- driving -----------------------------------------------------------

    def reports(self) -> dict[str, EstimateReport]:
        return {k: EstimateReport.from_dict(v) for k, v in self.state.reports.items()}

    def advance(self) -> str:
        """Perform the next transition; raises AwaitingLabels if the oracle is not ready."""
        ph = self.state.phase
        if ph == INITIALIZED:
            self.step_batch1()
        elif ph in (BATCH1_REQUESTED, BATCH2_REQUESTED):
            if not self.collect():
                raise AwaitingLabels(f"labels for batch {1 if ph == BATCH1_REQUESTED else 2} not available")
        elif ph == BATCH1_LABELED:
            self.step_plan()
        elif ph == PLANNED:
            self.step_batch2()
        elif ph == BATCH2_LABELED:
            self.finalize()
        else:
            raise PhaseError("campaign is already finalized")
        return self.state.phase

    def run(self, until: str = FINALIZED) -> str:
        while PHASES.index(self.state.phase) < PHASES.index(until):
            self.advance()
        return self.state.phase

    def save(self, path) -> None:
        self.state.save(path)

    @classmethod
    def resume(cls, path, ds: Dataset, oracle: AnnotationOracle) -> "Campaign":
        return cls(ds, CampaignState.load(path), oracle)
