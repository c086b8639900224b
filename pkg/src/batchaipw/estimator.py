"""Cross-fitted AIPW with missing outcomes, the RZ plug-in variant, and CIs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .crossfit import FoldedNuisances
from .data import Dataset, DataError, Unit
from .nuisance import NuisanceSet

AIPW = "aipw"
RZ = "rz"
EXTERNAL = "external"

# two-sided normal quantiles for common levels
_Z_TABLE = {0.10: 1.644854, 0.05: 1.959964, 0.01: 2.575829, 0.001: 3.290527}


class EstimationError(DataError):
    pass


def normal_quantile(alpha: float) -> float:
    """z_{1 - alpha/2}."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    for a, q in _Z_TABLE.items():
        if abs(alpha - a) < 1e-12:
            return q
    return NormalDist().inv_cdf(1.0 - alpha / 2.0)


@dataclass
class EstimateReport:
    tau_hat: float
    variance_hat: float
    ci: tuple[float, float]
    alpha: float
    n: int
    n_effective: dict[int, int]
    kind: str
    clip_events: dict[str, int] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def se(self) -> float:
        return math.sqrt(self.variance_hat / self.n) if self.n else float("nan")

    @property
    def ci_width(self) -> float:
        return self.ci[1] - self.ci[0]

    def covers(self, tau: float) -> bool:
        return self.ci[0] <= tau <= self.ci[1]

    def to_dict(self) -> dict:
        return {
            "tau_hat": self.tau_hat, "variance_hat": self.variance_hat, "se": self.se,
            "ci": list(self.ci), "alpha": self.alpha, "n": self.n,
            "n_effective": {str(k): v for k, v in self.n_effective.items()},
            "kind": self.kind, "clip_events": dict(self.clip_events), **self.extra,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimateReport":
        known = {"tau_hat", "variance_hat", "se", "ci", "alpha", "n", "n_effective", "kind", "clip_events"}
        return cls(
            tau_hat=float(d["tau_hat"]), variance_hat=float(d["variance_hat"]),
            ci=(float(d["ci"][0]), float(d["ci"][1])), alpha=float(d["alpha"]), n=int(d["n"]),
            n_effective={int(k): int(v) for k, v in d["n_effective"].items()},
            kind=d["kind"], clip_events=dict(d.get("clip_events", {})),
            extra={k: v for k, v in d.items() if k not in known},
        )


# ---------------------------------------------------------------------------
# per-unit scores


def _residual_term(z, r, y, arm, mu, weight):
    z = np.asarray(z)
    r = np.asarray(r, dtype=bool)
    y = np.asarray(y, dtype=float)
    active = (z == arm) & r
    if np.any(active & ~np.isfinite(y)):
        raise EstimationError("annotated unit without an outcome")
    resid = np.where(active, np.where(active, y, 0.0) - mu, 0.0)
    return np.where(active, resid * weight, 0.0)


def aipw_scores(z, r, y, mu_z, e_z, pi, arm: int) -> np.ndarray:
    """psi_z = 1[Z=z] R (Y - mu_z) / (e_z pi) + mu_z, vectorised over units."""
    e_z = np.asarray(e_z, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if np.any(pi <= 0) or np.any(pi > 1):
        raise EstimationError("annotation probabilities must lie in (0, 1]")
    with np.errstate(divide="ignore"):
        weight = 1.0 / (e_z * pi)
    return np.asarray(mu_z, dtype=float) + _residual_term(z, r, y, arm, mu_z, weight)


def rz_scores(z, r, y, mu_z, q_z, arm: int) -> np.ndarray:
    """psi_z = 1[Z=z, R=1] (Y - mu_z) / q_z + mu_z."""
    q_z = np.asarray(q_z, dtype=float)
    if np.any(q_z <= 0):
        raise EstimationError("joint scores must be positive")
    return np.asarray(mu_z, dtype=float) + _residual_term(z, r, y, arm, mu_z, 1.0 / q_z)


def weighted_scores(z, r, y, mu_z, weights, arm: int) -> np.ndarray:
    """psi_z with a supplied weight in place of 1 / (e_z pi)."""
    return np.asarray(mu_z, dtype=float) + _residual_term(z, r, y, arm, mu_z, np.asarray(weights, float))


def _unit_arrays(unit: Unit):
    x = np.asarray(unit.covariates, dtype=float)[None, :]
    c = None if unit.context_features is None else np.asarray(unit.context_features, float)[None, :]
    y = np.nan if unit.outcome is None else unit.outcome
    return x, c, np.array([unit.treatment]), np.array([unit.annotated]), np.array([y])


def aipw_score(unit: Unit, nuis: NuisanceSet, pi: float, arm: int) -> float:
    if unit.annotated and unit.outcome is None:
        raise EstimationError(f"unit {unit.id}: annotated but outcome missing")
    x, c, z, r, y = _unit_arrays(unit)
    mu = nuis.mu_hat(arm, x, c)
    return float(aipw_scores(z, r, y, mu, nuis.e_hat(arm, x), pi, arm)[0])


def rz_score(unit: Unit, nuis: NuisanceSet, arm: int) -> float:
    x, c, z, r, y = _unit_arrays(unit)
    mu = nuis.mu_hat(arm, x, c)
    return float(rz_scores(z, r, y, mu, nuis.q_hat(arm, x), arm)[0])


# ---------------------------------------------------------------------------
# estimates


def report_from_contributions(phi, alpha: float, kind: str, n_effective: dict[int, int],
                              clip_events: dict | None = None, extra: dict | None = None) -> EstimateReport:
    """Point estimate, sample variance and normal CI from per-unit contributions."""
    phi = np.asarray(phi, dtype=float)
    n = phi.size
    if n == 0:
        raise EstimationError("no units to estimate from")
    if not np.all(np.isfinite(phi)):
        raise EstimationError("non-finite influence contributions")
    tau = float(phi.mean())
    var = float(phi.var(ddof=1)) if n > 1 else 0.0
    half = normal_quantile(alpha) * math.sqrt(var / n)
    return EstimateReport(tau, var, (tau - half, tau + half), alpha, n, n_effective, kind,
                          dict(clip_events or {}), dict(extra or {}))


def _effective(ds: Dataset) -> dict[int, int]:
    return {a: int(np.sum((ds.arm == a) & ds.r)) for a in (0, 1)}


def _predictions(nuisances, ds: Dataset) -> dict[str, np.ndarray]:
    if isinstance(nuisances, FoldedNuisances):
        return nuisances.predict(ds)
    if isinstance(nuisances, NuisanceSet):
        return nuisances.predict(ds)
    return {k: np.asarray(v, dtype=float) for k, v in nuisances.items()}


def estimate_ate(ds: Dataset, nuisances, pi=None, kind: str = AIPW, alpha: float = 0.05,
                 weight_cap: float | None = None, e_bounds: tuple[float, float] = (0.02, 0.98),
                 extra: dict | None = None) -> EstimateReport:
    """ATE as the mean of psi_1 - psi_0 over all units.

    ``nuisances`` is a :class:`FoldedNuisances` (scored out of fold), a single
    :class:`NuisanceSet`, or a dict of prediction arrays with keys ``mu1``,
    ``mu0``, ``e1`` (aipw) or ``q1``, ``q0`` (rz). ``pi`` holds each unit's
    annotation probability and is required for ``kind="aipw"``.
    """
    p = _predictions(nuisances, ds)
    if not (_effective(ds)[0] and _effective(ds)[1]):
        raise EstimationError("each arm needs at least one annotated unit")
    z, r, y = ds.arm, ds.r, ds.y
    events = {"weight_capped": 0}
    if kind == AIPW:
        if pi is None:
            raise EstimationError("aipw needs per-unit annotation probabilities")
        pi = np.broadcast_to(np.asarray(pi, dtype=float), (ds.n,))
        if not np.all((pi > 0) & (pi <= 1)):
            raise EstimationError("annotation probabilities must lie in (0, 1]")
        e1 = p["e1"]
        events["e_at_bound"] = int(np.sum((e1 <= e_bounds[0]) | (e1 >= e_bounds[1])))
        w1 = 1.0 / (e1 * pi)
        w0 = 1.0 / ((1.0 - e1) * pi)
    elif kind == RZ:
        if "q1" not in p:
            raise EstimationError("rz estimator needs fitted joint scores")
        w1, w0 = 1.0 / p["q1"], 1.0 / p["q0"]
    else:
        raise EstimationError(f"unknown estimator kind {kind!r}")
    if weight_cap is not None:
        events["weight_capped"] = int(np.sum(((z == 1) & r & (w1 > weight_cap))
                                             | ((z == 0) & r & (w0 > weight_cap))))
        w1, w0 = np.minimum(w1, weight_cap), np.minimum(w0, weight_cap)
    psi1 = weighted_scores(z, r, y, p["mu1"], w1, 1)
    psi0 = weighted_scores(z, r, y, p["mu0"], w0, 0)
    return report_from_contributions(psi1 - psi0, alpha, kind, _effective(ds), events, extra)


def estimate_with_external_weights(ds: Dataset, nuisances, weights, alpha: float = 0.05,
                                   extra: dict | None = None) -> EstimateReport:
    """AIPW with externally learned balancing weights replacing 1 / (e pi).

    ``weights[i]`` multiplies the residual of unit i in its own arm.
    """
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if weights.size != ds.n:
        raise EstimationError("one weight per unit is required")
    if not np.all(np.isfinite(weights)):
        raise EstimationError("weights must be finite")
    if np.any(weights < 0):
        raise EstimationError("weights must be nonnegative")
    p = _predictions(nuisances, ds)
    z, r, y = ds.arm, ds.r, ds.y
    psi1 = weighted_scores(z, r, y, p["mu1"], weights, 1)
    psi0 = weighted_scores(z, r, y, p["mu0"], weights, 0)
    return report_from_contributions(psi1 - psi0, alpha, EXTERNAL, _effective(ds), {}, extra)
