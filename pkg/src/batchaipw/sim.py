"""Synthetic data and the Monte Carlo runner comparing annotation strategies.

The data-generating process draws five standard-normal covariates, assigns
treatment with a logistic propensity in ``X2 + X3``, and gives each arm a
heteroskedastic noise level (``1.3 + 0.4 sin X1`` for treated units,
``3.5 + 0.3 cos X3`` for controls). Potential outcomes live in a
:class:`SealedOutcomes` table that only the simulation oracle and the truth
metrics touch.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .campaign import Campaign, CampaignConfig, SimulationOracle
from .data import BINARY, BudgetSpec, Dataset
from .estimator import AIPW, RZ
from .nuisance import NuisanceSpecs

log = logging.getLogger(__name__)

ADAPTIVE_AIPW = "adaptive-aipw"
ADAPTIVE_RZ = "adaptive-rz"
UNIFORM = "uniform"
SKYLINE = "skyline"
METHODS = (ADAPTIVE_AIPW, ADAPTIVE_RZ, UNIFORM, SKYLINE)

LONG_COLUMNS = ("method", "budget", "trial", "tau_hat", "sq_error", "ci_width", "covered",
                "realized_fraction", "failed", "error")
AGG_COLUMNS = ("method", "budget", "trials", "failed", "mse", "mean_ci_width", "mean_log_ci_width",
               "coverage", "mean_realized_fraction")


@dataclass(frozen=True)
class DgpSpec:
    n: int = 1000
    d: int = 5
    theta0: float = 3.0
    # P(Z=1 | X) = 1 / (1 + exp(prop_intercept + X @ prop_coef))
    prop_intercept: float = 0.5
    prop_coef: tuple[float, ...] = (0.0, 1.0, 1.0, 0.0, 0.0)
    # sigma2_1 = max(a1 + b1 sin X1, 0); sigma2_0 = max(a0 + b0 cos X3, 0)
    var1: tuple[float, float] = (1.3, 0.4)
    var0: tuple[float, float] = (3.5, 0.3)
    noise_scale: str = "sd"  # draw eps with sd sqrt(sigma2), or "variance": sd sigma2
    outcome_coupling: str = "independent"  # Y1 = 5 + X1 - 2 X2 + theta0 + eps1; or "additive": Y0 + theta0 + eps1
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.d < 3:
            raise ValueError("the outcome and variance functions use X1..X3; need d >= 3")
        if len(self.prop_coef) != self.d:
            raise ValueError("prop_coef needs one entry per covariate")
        if self.noise_scale not in ("sd", "variance"):
            raise ValueError(f"unknown noise_scale {self.noise_scale!r}")
        if self.outcome_coupling not in ("additive", "independent"):
            raise ValueError(f"unknown outcome_coupling {self.outcome_coupling!r}")

    def propensity(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return 1.0 / (1.0 + np.exp(self.prop_intercept + X @ np.asarray(self.prop_coef)))

    def sigma2(self, z: int, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if int(z) == 1:
            a, b = self.var1
            return np.maximum(a + b * np.sin(X[:, 0]), 0.0)
        a, b = self.var0
        return np.maximum(a + b * np.cos(X[:, 2]), 0.0)

    def base_outcome(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return 5.0 + X[:, 0] - 2.0 * X[:, 1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prop_coef"] = list(self.prop_coef)
        d["var1"], d["var0"] = list(self.var1), list(self.var0)
        return d


class SealedOutcomes:
    """Both potential outcomes, readable only through ``reveal`` and truth metrics."""

    def __init__(self, ids, z, y1, y0):
        self._index = {int(i): k for k, i in enumerate(ids)}
        self._z = np.asarray(z, dtype=int)
        self._y1 = np.asarray(y1, dtype=float)
        self._y0 = np.asarray(y0, dtype=float)

    def reveal(self, ids) -> dict[int, float]:
        out = {}
        for i in ids:
            k = self._index[int(i)]
            out[int(i)] = float(self._y1[k] if self._z[k] == 1 else self._y0[k])
        return out

    def sample_ate(self) -> float:
        return float(np.mean(self._y1 - self._y0))

    def effects(self) -> np.ndarray:
        return self._y1 - self._y0

    def subset(self, rows) -> "SealedOutcomes":
        rows = np.asarray(rows)
        ids = np.fromiter(self._index, dtype=np.int64)[rows]
        return SealedOutcomes(ids, self._z[rows], self._y1[rows], self._y0[rows])

    def permuted(self, rng, keep=()) -> "SealedOutcomes":
        """Copy with outcomes shuffled among units not in ``keep`` (for invariance tests)."""
        keep_rows = {self._index[int(i)] for i in keep}
        free = np.array([k for k in range(self._z.size) if k not in keep_rows], dtype=int)
        y1, y0 = self._y1.copy(), self._y0.copy()
        perm = rng.permutation(free)
        y1[free], y0[free] = y1[perm], y0[perm]
        ids = np.fromiter(self._index, dtype=np.int64)
        return SealedOutcomes(ids, self._z, y1, y0)


def generate(spec: DgpSpec, seed: int | None = None) -> tuple[Dataset, SealedOutcomes]:
    """Draw a dataset (no outcomes revealed) and its sealed potential outcomes."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n, d = spec.n, spec.d
    X = rng.standard_normal((n, d))
    z = (rng.random(n) < spec.propensity(X)).astype(float)
    s1, s0 = spec.sigma2(1, X), spec.sigma2(0, X)
    if spec.noise_scale == "sd":
        sd1, sd0 = np.sqrt(s1), np.sqrt(s0)
    else:
        sd1, sd0 = s1, s0
    eps0 = rng.standard_normal(n) * sd0
    eps1 = rng.standard_normal(n) * sd1
    y0 = spec.base_outcome(X) + eps0
    if spec.outcome_coupling == "additive":
        y1 = y0 + spec.theta0 + eps1
    else:
        y1 = spec.base_outcome(X) + spec.theta0 + eps1
    ids = np.arange(n, dtype=np.int64)
    ds = Dataset(ids, X, z, np.zeros(n, bool), np.full(n, np.nan), None, BINARY)
    return ds, SealedOutcomes(ids, z, y1, y0)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class TrialMetrics:
    """Long-format per-(method, budget, trial) results against the true ATE."""

    truth: float
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, method: str, budget: float, trial: int, tau_hat=float("nan"), ci=(float("nan"),) * 2,
            realized_fraction=float("nan"), error: str = "") -> None:
        failed = bool(error)
        width = float(ci[1] - ci[0])
        self.rows.append({
            "method": method, "budget": float(budget), "trial": int(trial),
            "tau_hat": float(tau_hat), "sq_error": float((tau_hat - self.truth) ** 2),
            "ci_width": width, "covered": (not failed) and bool(ci[0] <= self.truth <= ci[1]),
            "realized_fraction": float(realized_fraction), "failed": failed, "error": error,
        })

    def extend(self, other: "TrialMetrics") -> None:
        self.rows.extend(other.rows)

    def methods(self) -> list[str]:
        return sorted({r["method"] for r in self.rows}, key=lambda m: (METHODS + (m,)).index(m))

    def budgets(self) -> list[float]:
        return sorted({r["budget"] for r in self.rows})

    def select(self, method: str, budget: float) -> list[dict]:
        return [r for r in self.rows if r["method"] == method and r["budget"] == budget]

    def aggregate(self) -> list[dict]:
        out = []
        for m in self.methods():
            for b in self.budgets():
                rows = self.select(m, b)
                if not rows:
                    continue
                ok = [r for r in rows if not r["failed"]]
                k = len(ok)
                agg = {"method": m, "budget": b, "trials": k, "failed": len(rows) - k}
                if k:
                    agg["mse"] = math.fsum(r["sq_error"] for r in ok) / k
                    agg["mean_ci_width"] = math.fsum(r["ci_width"] for r in ok) / k
                    agg["mean_log_ci_width"] = math.fsum(math.log(r["ci_width"]) if r["ci_width"] > 0
                                                         else -math.inf for r in ok) / k
                    agg["coverage"] = sum(r["covered"] for r in ok) / k
                    agg["mean_realized_fraction"] = math.fsum(r["realized_fraction"] for r in ok) / k
                else:
                    for key in AGG_COLUMNS[4:]:
                        agg[key] = float("nan")
                out.append(agg)
        return out

    def agg_lookup(self) -> dict[tuple[str, float], dict]:
        return {(a["method"], a["budget"]): a for a in self.aggregate()}

    def write_long(self, path) -> None:
        _write_csv(path, LONG_COLUMNS, self.rows)

    def write_aggregate(self, path) -> None:
        _write_csv(path, AGG_COLUMNS, self.aggregate())


def _write_csv(path, columns, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass(frozen=True)
class Savings:
    budget: float
    equivalent_uniform_budget: float
    savings: float
    lower_bound: bool = False  # adaptive beat every point on the uniform curve


def budget_saved(metrics: TrialMetrics, method: str = ADAPTIVE_AIPW, baseline: str = UNIFORM,
                 include_skyline: bool = True) -> dict[float, Savings]:
    """Share of annotations saved relative to the baseline at equal mean CI width.

    The baseline's width-vs-budget curve is interpolated linearly; the skyline
    (when present) serves as its point at budget 1. Savings are clamped at 0
    when the method is wider than the baseline.
    """
    agg = metrics.agg_lookup()
    curve = {b: agg[(baseline, b)]["mean_ci_width"] for b in metrics.budgets() if (baseline, b) in agg}
    if include_skyline and 1.0 not in curve:
        sky = [a for (m, _), a in agg.items() if m == SKYLINE]
        if sky:
            curve[1.0] = sky[0]["mean_ci_width"]
    if len(curve) < 1:
        raise ValueError(f"no {baseline} widths to compare against")
    bs = np.array(sorted(curve))
    ws = np.array([curve[b] for b in bs])
    out = {}
    for b in metrics.budgets():
        if (method, b) not in agg:
            continue
        w = agg[(method, b)]["mean_ci_width"]
        bu, lower = _invert_width(bs, ws, w)
        out[b] = Savings(b, bu, max(0.0, (bu - b) / bu), lower)
    return out


def _invert_width(bs: np.ndarray, ws: np.ndarray, w: float) -> tuple[float, bool]:
    """Smallest budget on the piecewise-linear curve whose width equals ``w``."""
    if w < ws.min():
        return float(bs[np.argmin(ws)]), True
    if w >= ws[0]:
        return float(bs[0]), False
    for k in range(bs.size - 1):
        w_a, w_b = ws[k], ws[k + 1]
        if min(w_a, w_b) <= w <= max(w_a, w_b) and w_a != w_b:
            t = (w_a - w) / (w_a - w_b)
            return float(bs[k] + t * (bs[k + 1] - bs[k])), False
    return float(bs[-1]), False


# ---------------------------------------------------------------------------
# runner


@dataclass(frozen=True)
class TrialSettings:
    budgets: tuple[float, ...]
    methods: tuple[str, ...] = METHODS
    dgp: DgpSpec = DgpSpec()
    specs: NuisanceSpecs = NuisanceSpecs()
    kappa: float = 0.55
    folds: int = 5
    alpha: float = 0.05
    pi_floor: float = 0.01
    score_pi: str = "design"
    holdout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if not self.budgets:
            raise ValueError("at least one budget is required")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(trial)]).generate_state(1)[0])


def _campaign_estimate(ds, sealed, cfg: CampaignConfig, seed: int):
    camp = Campaign.start(ds, cfg, SimulationOracle(sealed), seed)
    camp.run()
    realized = float(camp.observed().r.mean())
    return camp.reports(), realized


def run_trial(settings: TrialSettings, trial: int) -> TrialMetrics:
    s = settings
    tseed = trial_seed(s.seed, trial)
    ds, sealed = generate(s.dgp, seed=tseed)
    if s.holdout > 0:
        # validation split set aside before campaigning; not used further
        rng = np.random.default_rng(np.random.SeedSequence([tseed, 99]))
        keep = np.sort(rng.permutation(ds.n)[int(round(s.holdout * ds.n)):])
        ds, sealed = ds.subset(keep), sealed.subset(keep)
    metrics = TrialMetrics(truth=s.dgp.theta0)

    def config(budget, planner, estimators):
        return CampaignConfig(budget=BudgetSpec("global", B=budget), kappa=s.kappa, folds=s.folds,
                              alpha=s.alpha, planner=planner, estimators=estimators,
                              score_pi=s.score_pi, pi_floor=s.pi_floor, specs=s.specs)

    adaptive = [m for m in (ADAPTIVE_AIPW, ADAPTIVE_RZ) if m in s.methods]
    for b in s.budgets:
        if adaptive:
            kinds = tuple(AIPW if m == ADAPTIVE_AIPW else RZ for m in adaptive)
            try:
                reps, frac = _campaign_estimate(ds, sealed, config(b, "adaptive", kinds), tseed)
                for m, k in zip(adaptive, kinds):
                    metrics.add(m, b, trial, reps[k].tau_hat, reps[k].ci, frac)
            except Exception as exc:  # recorded, not fatal
                log.warning("trial %d, adaptive at B=%g failed: %s", trial, b, exc)
                for m in adaptive:
                    metrics.add(m, b, trial, error=f"{type(exc).__name__}: {exc}")
        if UNIFORM in s.methods:
            try:
                reps, frac = _campaign_estimate(ds, sealed, config(b, "uniform", (AIPW,)), tseed)
                metrics.add(UNIFORM, b, trial, reps[AIPW].tau_hat, reps[AIPW].ci, frac)
            except Exception as exc:
                log.warning("trial %d, uniform at B=%g failed: %s", trial, b, exc)
                metrics.add(UNIFORM, b, trial, error=f"{type(exc).__name__}: {exc}")
    if SKYLINE in s.methods:
        # every outcome annotated; one run per trial, reported at each budget
        try:
            reps, frac = _campaign_estimate(ds, sealed, config(1.0, "uniform", (AIPW,)), tseed)
            for b in s.budgets:
                metrics.add(SKYLINE, b, trial, reps[AIPW].tau_hat, reps[AIPW].ci, frac)
        except Exception as exc:
            for b in s.budgets:
                metrics.add(SKYLINE, b, trial, error=f"{type(exc).__name__}: {exc}")
    return metrics


def _run_one(args):
    return run_trial(*args)


def run_trials(budgets, methods=METHODS, trials: int = 100, dgp: DgpSpec = DgpSpec(),
               specs: NuisanceSpecs = NuisanceSpecs(), seed: int = 0, workers: int = 1,
               **kw) -> TrialMetrics:
    """Run ``trials`` independent trials; the result depends only on the arguments, not ``workers``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    settings = TrialSettings(budgets=tuple(float(b) for b in budgets), methods=tuple(methods),
                             dgp=dgp, specs=specs, seed=int(seed), **kw)
    jobs = [(settings, t) for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_one, jobs))
    else:
        parts = [_run_one(j) for j in jobs]
    out = TrialMetrics(truth=dgp.theta0, config={
        "budgets": list(settings.budgets), "methods": list(settings.methods), "trials": trials,
        "dgp": dgp.to_dict(), "specs": specs.to_dict(), "seed": int(seed),
        **{k: v for k, v in asdict(replace(settings)).items()
           if k not in ("budgets", "methods", "dgp", "specs", "seed")},
    })
    for p in parts:
        out.extend(p)
    return out
