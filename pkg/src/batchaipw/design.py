"""Variance-optimal annotation probabilities and efficiency analytics.

All allocations share one shape: the annotation probability of a unit is
``clip(c * w, lo, hi)`` for a unit-specific weight ``w`` and a scalar ``c``
chosen so that a weighted mean of the probabilities exhausts the budget.
For the global budget ``w = sqrt(sigma2_z(x)) / e_z(x)``; for per-arm budgets
the same weight is normalised within each arm; for continuous treatments
``w = sqrt(sigma2(z0, x) / (e(z0, x) * e_h(z0, x)))`` with ``e_h`` the
kernel-smoothed generalized propensity.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, DataError
from .nuisance import NuisanceSet

log = logging.getLogger(__name__)

BUDGET_RTOL = 1e-9


class DesignError(ValueError):
    pass


class QuadratureError(DesignError):
    pass


# ---------------------------------------------------------------------------
# water-filling


@dataclass
class Waterfill:
    values: np.ndarray
    scale: float
    n_low: int
    n_high: int
    feasible: bool = True
    binding: bool = True


def waterfill(weights, measure, total: float, lo=0.0, hi=1.0) -> Waterfill:
    """Solve ``sum(measure * clip(c * weights, lo, hi)) == total`` for ``c``.

    The left side is continuous, nondecreasing and piecewise linear in ``c``
    with kinks at ``lo / w`` and ``hi / w``; the kink interval containing the
    root is found by bisection over the sorted kinks and the root is then
    solved exactly on that linear piece. Units with zero measure do not
    consume budget but still receive ``clip(c * w, lo, hi)``.

    If even ``hi`` everywhere does not use up ``total`` the budget does not
    bind and every unit gets ``hi``. If ``lo`` everywhere already exceeds it
    the problem is infeasible; every unit gets ``lo`` and ``feasible`` is False.
    """
    w = np.asarray(weights, dtype=float)
    m = np.asarray(measure, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), w.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), w.shape)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise DesignError("allocation weights must be positive and finite")
    if np.any(m < 0) or np.any(lo > hi):
        raise DesignError("invalid measure or bounds")

    top = float(np.sum(m * hi))
    bottom = float(np.sum(m * lo))
    if top <= total:
        return Waterfill(hi.copy(), math.inf, 0, int(np.sum(m > 0)), True, False)
    if bottom >= total:
        return Waterfill(lo.copy(), 0.0, int(np.sum(m > 0)), 0, bottom <= total * (1 + BUDGET_RTOL))

    act = m > 0
    wa, ma, la, ha = w[act], m[act], lo[act], hi[act]

    def f(c):
        return float(np.sum(ma * np.clip(c * wa, la, ha)))

    kinks = np.unique(np.concatenate([la / wa, ha / wa]))
    # f(kinks[0]) = bottom < total <= top = f(kinks[-1])
    a, b = 0, kinks.size - 1
    while b - a > 1:
        mid = (a + b) // 2
        if f(kinks[mid]) <= total:
            a = mid
        else:
            b = mid
    cm = 0.5 * (kinks[a] + kinks[b])
    low = cm * wa <= la
    high = cm * wa >= ha
    free = ~(low | high)
    fixed = float(np.sum(ma[low] * la[low]) + np.sum(ma[high] * ha[high]))
    slope = float(np.sum(ma[free] * wa[free]))
    c = (total - fixed) / slope if slope > 0 else kinks[a]
    c = min(max(c, kinks[a]), kinks[b])
    vals = np.clip(c * w, lo, hi)
    return Waterfill(vals, float(c), int(np.sum(vals <= lo)), int(np.sum(vals >= hi)))


# ---------------------------------------------------------------------------
# binary treatment allocations


@dataclass
class PiSolution:
    """Annotation probabilities pi(z, x_i) for both arms at every unit."""

    pi1: np.ndarray
    pi0: np.ndarray
    z: np.ndarray
    budget: float | tuple[float, float]
    kind: str
    scale: float | tuple[float, float]
    closed_form_scale: float | tuple[float, float] | None = None
    n_clip_low: int = 0
    n_clip_high: int = 0
    fallback: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def realized(self) -> np.ndarray:
        """Probability for each unit's own arm."""
        return np.where(self.z == 1, self.pi1, self.pi0)

    def __call__(self, z, X=None) -> np.ndarray:
        z = np.asarray(z)
        if z.ndim == 0:
            return self.pi1 if int(z) == 1 else self.pi0
        return np.where(z == 1, self.pi1, self.pi0)

    def expected_fraction(self) -> float:
        r = self.realized
        return float(r.mean()) if r.size else 0.0

    def arm_fraction(self, z: int) -> float:
        sel = self.z == z
        vals = (self.pi1 if z == 1 else self.pi0)[sel]
        return float(vals.mean()) if vals.size else 0.0


def _sd(s2):
    s2 = np.asarray(s2, dtype=float)
    if np.any(s2 <= 0) or not np.all(np.isfinite(s2)):
        raise DesignError("conditional variances must be positive and finite")
    return np.sqrt(s2)


def _check_budget(B):
    if not (0.0 < B <= 1.0):
        raise DesignError(f"budget must lie in (0, 1], got {B}")


def global_allocation(s1, s0, e1, z, budget: float, lo=0.01, hi=1.0,
                      measure: str = "realized", mask=None) -> PiSolution:
    """Global-budget optimum from nuisance arrays.

    The unclipped optimum is ``sqrt(s_z)/e_z * B / mean(sqrt(s_1) + sqrt(s_0))``.
    Probabilities are then clipped to ``[lo, hi]`` and the scale re-solved so
    the budget is met exactly: ``mean_i pi(Z_i, X_i) = B`` for
    ``measure="realized"``, or ``mean_i sum_z e_z(X_i) pi(z, X_i) = B`` for
    ``measure="expected"``. With ``mask`` only the selected units count
    towards the budget; the others still receive probabilities.
    """
    _check_budget(budget)
    e1 = np.asarray(e1, dtype=float)
    z = np.asarray(z).astype(int)
    sd1, sd0 = _sd(s1), _sd(s0)
    n = z.size
    e0 = 1.0 - e1
    if np.any(e1 <= 0) or np.any(e0 <= 0):
        raise DesignError("propensities must lie strictly inside (0, 1)")
    sel = np.ones(n, bool) if mask is None else np.asarray(mask, dtype=bool)
    if not sel.any():
        raise DesignError("no units count towards the budget")
    w = np.concatenate([sd1 / e1, sd0 / e0])
    if measure == "realized":
        m = np.concatenate([(z == 1) & sel, (z == 0) & sel]).astype(float)
    elif measure == "expected":
        m = np.concatenate([e1 * sel, e0 * sel])
    else:
        raise DesignError(f"unknown budget measure {measure!r}")
    m /= sel.sum()
    closed_form = budget / float(np.mean((sd1 + sd0)[sel]))
    if lo > budget:
        log.warning("probability floor %.3g exceeds budget %.3g; using uniform allocation", lo, budget)
        u = np.full(n, float(budget))
        return PiSolution(u, u.copy(), z, budget, "global", budget, closed_form, fallback=True,
                          notes=["floor exceeds budget; uniform fallback"])
    wf = waterfill(w, m, budget, lo, hi)
    return PiSolution(wf.values[:n], wf.values[n:], z, budget, "global", wf.scale, closed_form,
                      wf.n_low, wf.n_high)


def per_arm_allocation(s1, s0, e1, z, B0: float, B1: float, lo=0.01, hi=1.0,
                       mask=None, bounds: dict | None = None) -> PiSolution:
    """Per-arm optimum: within arm z, pi is proportional to sqrt(s_z / e_z^2) and averages B_z.

    ``bounds`` optionally overrides ``(lo, hi)`` per arm.
    """
    _check_budget(B0)
    _check_budget(B1)
    e1 = np.asarray(e1, dtype=float)
    z = np.asarray(z).astype(int)
    sel_all = np.ones(z.size, bool) if mask is None else np.asarray(mask, dtype=bool)
    sds = {1: _sd(s1), 0: _sd(s0)}
    es = {1: e1, 0: 1.0 - e1}
    budgets = {0: B0, 1: B1}
    vals, scales, closed_form = {}, {}, {}
    n_low = n_high = 0
    fallback = False
    for arm in (0, 1):
        a_lo, a_hi = (bounds or {}).get(arm, (lo, hi))
        sel = (z == arm) & sel_all
        if not sel.any():
            raise DesignError(f"arm {arm} has no units")
        w = sds[arm] / es[arm]
        closed_form[arm] = budgets[arm] / float(np.mean(w[sel]))
        if a_lo > budgets[arm]:
            vals[arm] = np.full(z.size, float(budgets[arm]))
            scales[arm] = float("nan")
            fallback = True
            continue
        wf = waterfill(w, sel / sel.sum(), budgets[arm], a_lo, a_hi)
        vals[arm], scales[arm] = wf.values, wf.scale
        n_low += int(np.sum(wf.values[sel] <= a_lo))
        n_high += int(np.sum(wf.values[sel] >= a_hi))
    return PiSolution(vals[1], vals[0], z, (B0, B1), "per-arm", (scales[0], scales[1]),
                      (closed_form[0], closed_form[1]), n_low, n_high, fallback)


def uniform_allocation(z, budget: float | tuple[float, float]) -> PiSolution:
    z = np.asarray(z).astype(int)
    if isinstance(budget, tuple):
        B0, B1 = budget
        return PiSolution(np.full(z.size, float(B1)), np.full(z.size, float(B0)), z, budget,
                          "uniform", (1.0, 1.0))
    return PiSolution(np.full(z.size, float(budget)), np.full(z.size, float(budget)), z, budget,
                      "uniform", 1.0)


def optimal_pi_global(ds: Dataset, nuis: NuisanceSet, B: float, pi_floor: float = 0.01,
                      pi_cap: float = 1.0, measure: str = "realized") -> PiSolution:
    """Closed-form global-budget probabilities for every unit of ``ds``."""
    p = nuis.predict(ds)
    return global_allocation(p["s1"], p["s0"], p["e1"], ds.arm, B, pi_floor, pi_cap, measure)


def optimal_pi_per_arm(ds: Dataset, nuis: NuisanceSet, B0: float, B1: float,
                       pi_floor: float = 0.01, pi_cap: float = 1.0) -> PiSolution:
    p = nuis.predict(ds)
    return per_arm_allocation(p["s1"], p["s0"], p["e1"], ds.arm, B0, B1, pi_floor, pi_cap)


# ---------------------------------------------------------------------------
# asymptotic variance and relative efficiency


def avar_pi_term(s1, s0, e1, pi1, pi0, weights=None) -> float:
    """sum_z E[s_z / (e_z pi_z)] under the (optionally weighted) empirical measure."""
    pi1 = np.asarray(pi1, dtype=float)
    pi0 = np.asarray(pi0, dtype=float)
    if np.any(pi1 <= 0) or np.any(pi0 <= 0):
        raise DesignError("annotation probabilities must be positive")
    e1 = np.asarray(e1, dtype=float)
    terms = np.asarray(s1) / (e1 * pi1) + np.asarray(s0) / ((1.0 - e1) * pi0)
    if weights is None:
        return float(np.mean(terms))
    weights = np.asarray(weights, dtype=float)
    return float(np.sum(weights * terms) / np.sum(weights))


def asymptotic_variance(ds: Dataset, nuis: NuisanceSet, pi) -> float:
    """Plug-in asymptotic variance: Var[mu1 - mu0] + sum_z mean[s_z / (e_z pi_z)].

    ``pi`` is either a callable ``pi(z, X)`` or a pair ``(pi1, pi0)`` of arrays.
    """
    p = nuis.predict(ds)
    if callable(pi):
        pi1, pi0 = pi(1, ds.X), pi(0, ds.X)
    else:
        pi1, pi0 = pi
    pi1 = np.broadcast_to(np.asarray(pi1, dtype=float), (ds.n,))
    pi0 = np.broadcast_to(np.asarray(pi0, dtype=float), (ds.n,))
    return float(np.var(p["mu1"] - p["mu0"])) + avar_pi_term(p["s1"], p["s0"], p["e1"], pi1, pi0)


def relative_efficiency_from_arrays(s1, s0, e1, tau_x_variance: float, B: float) -> float:
    _check_budget(B)
    sd1, sd0 = _sd(s1), _sd(s0)
    e1 = np.asarray(e1, dtype=float)
    num = np.mean(sd1 + sd0) ** 2 / B + tau_x_variance
    den = np.mean(np.asarray(s1) / e1 + np.asarray(s0) / (1.0 - e1)) / B + tau_x_variance
    if den <= 0:
        raise DesignError("zero denominator in relative efficiency")
    return float(num / den)


def relative_efficiency(ds: Dataset, nuis: NuisanceSet, tau_x_variance: float | None, B: float) -> float:
    """AVar under the unclipped optimum divided by AVar under uniform sampling at ``B``.

    ``tau_x_variance=None`` uses the sample variance of mu1 - mu0.
    """
    p = nuis.predict(ds)
    if tau_x_variance is None:
        tau_x_variance = float(np.var(p["mu1"] - p["mu0"], ddof=1)) if ds.n > 1 else 0.0
    return relative_efficiency_from_arrays(p["s1"], p["s0"], p["e1"], tau_x_variance, B)


# ---------------------------------------------------------------------------
# two-batch mixing


def batch2_probability(pi_star, kappa: float, pi1):
    """Second-batch probability so that ``kappa*pi1 + (1-kappa)*pi2 = pi_star``.

    Returns ``(pi2, feasible)``; values outside [0, 1] are clamped and
    flagged infeasible rather than raised.
    """
    if not 0.0 < kappa < 1.0:
        raise DesignError("kappa must lie in (0, 1)")
    raw = (np.asarray(pi_star, dtype=float) - kappa * np.asarray(pi1, dtype=float)) / (1.0 - kappa)
    tol = 1e-12
    feasible = (raw >= -tol) & (raw <= 1.0 + tol)
    pi2 = np.clip(raw, 0.0, 1.0)
    if pi2.ndim == 0:
        return float(pi2), bool(feasible)
    return pi2, feasible


def feasible_box(kappa: float, pi1: float, lo: float = 0.0, hi: float = 1.0) -> tuple[float, float]:
    """Range of mixture probabilities reachable with pi2 in [0, 1]."""
    return max(lo, kappa * pi1), min(hi, kappa * pi1 + (1.0 - kappa))


# ---------------------------------------------------------------------------
# continuous treatments


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "gaussian"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "box"):
            raise DesignError(f"unknown kernel {self.kind!r}")
        if not self.bandwidth > 0:
            raise DesignError("bandwidth must be positive")

    def __call__(self, u) -> np.ndarray:
        """K_h(u) = K(u / h) / h."""
        t = np.asarray(u, dtype=float) / self.bandwidth
        if self.kind == "gaussian":
            k = np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
        else:
            k = np.where(np.abs(t) <= 1.0, 0.5, 0.0)
        return k / self.bandwidth

    @property
    def half_width(self) -> float:
        return (6.0 if self.kind == "gaussian" else 1.0) * self.bandwidth


def kernel_localized_propensity(e_fn: Callable, z0: float, X, kernel: KernelSpec,
                                tol: float = 1e-8, max_levels: int = 22) -> np.ndarray:
    """Integral of K_h(z' - z0) e(z', x) dz' for every row of ``X``.

    Trapezoid rule over ``z0 +/- half_width`` with interval halving until two
    successive refinements change no unit's value by more than ``tol``
    (relative to max(1, |value|)). ``e_fn(z, X)`` receives an array of equal
    treatment values, one per row.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    a, b = z0 - kernel.half_width, z0 + kernel.half_width

    def g(zv):
        return kernel(zv - z0) * np.asarray(e_fn(np.full(n, zv), X), dtype=float)

    N = 16
    h = (b - a) / N
    grid = np.linspace(a, b, N + 1)
    acc = sum(g(zv) for zv in grid[1:-1])
    ends = 0.5 * (g(a) + g(b))
    T = h * (ends + acc)
    calm = 0
    for _ in range(max_levels):
        mids = a + h * (np.arange(N) + 0.5)
        acc = acc + sum(g(zv) for zv in mids)
        N *= 2
        h *= 0.5
        T_new = h * (ends + acc)
        change = np.max(np.abs(T_new - T) / np.maximum(1.0, np.abs(T_new))) if n else 0.0
        T = T_new
        calm = calm + 1 if change <= tol else 0
        if calm >= 2:
            return T
    raise QuadratureError(f"kernel quadrature did not reach tolerance {tol}")


@dataclass
class ContinuousPiSolution:
    pi: np.ndarray
    kernel_weight: np.ndarray
    e_tilde: np.ndarray
    z0: float
    budget: float
    scale: float
    n_clip_low: int = 0
    n_clip_high: int = 0

    def kernel_budget(self) -> float:
        """mean_i pi_i K_h(Z_i - z0)."""
        return float(np.mean(self.pi * self.kernel_weight))


def continuous_allocation(sigma2, e_at_z0, e_tilde, Z, z0: float, kernel: KernelSpec,
                          B: float, lo: float = 0.0, hi: float = 1.0) -> ContinuousPiSolution:
    _check_budget(B)
    sd = _sd(sigma2)
    e_at_z0 = np.asarray(e_at_z0, dtype=float)
    e_tilde = np.asarray(e_tilde, dtype=float)
    w = sd / np.sqrt(e_at_z0 * e_tilde)
    kw = kernel(np.asarray(Z, dtype=float) - z0)
    n = kw.size
    wf = waterfill(w, kw / n, B, lo, hi)
    return ContinuousPiSolution(wf.values, kw, e_tilde, z0, B, wf.scale, wf.n_low, wf.n_high)


def optimal_pi_continuous(ds: Dataset, sigma2: Callable, e: Callable, kernel: KernelSpec,
                          z0: float, B: float, e_floor: float = 1e-8, lo: float = 0.0,
                          tol: float = 1e-8) -> ContinuousPiSolution:
    """Kernel-localized optimum for a continuous treatment at dose ``z0``.

    ``sigma2(z, X)`` and ``e(z, X)`` take an array of treatment values (one
    per row of ``X``); ``e`` is the generalized propensity (a conditional
    density in z).
    """
    zz = np.full(ds.n, float(z0))
    e_tilde = kernel_localized_propensity(e, z0, ds.X, kernel, tol=tol)
    if np.any(e_tilde < e_floor):
        raise DesignError("kernel-localized propensity below floor; widen the bandwidth")
    e0 = np.asarray(e(zz, ds.X), dtype=float)
    if np.any(e0 < e_floor):
        raise DesignError("generalized propensity at z0 below floor")
    return continuous_allocation(sigma2(zz, ds.X), e0, e_tilde, ds.z, z0, kernel, B, lo)


# ---------------------------------------------------------------------------
# plans


@dataclass
class AnnotationPlan:
    ids: np.ndarray
    pi: np.ndarray
    r: np.ndarray
    budget: float | tuple[float, float]
    kind: str = "global"
    n_clip_low: int = 0
    n_clip_high: int = 0

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.r = np.asarray(self.r, dtype=bool)
        if np.any(self.pi <= 0) or np.any(self.pi > 1):
            raise DesignError("plan probabilities must lie in (0, 1]")

    @property
    def expected_fraction(self) -> float:
        return float(self.pi.mean()) if self.pi.size else 0.0

    @property
    def realized_fraction(self) -> float:
        return float(self.r.mean()) if self.r.size else 0.0

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "pi", "r"])
            for i, p, r in zip(self.ids, self.pi, self.r):
                w.writerow([int(i), repr(float(p)), int(r)])


def read_plan(path) -> dict[int, tuple[float, int]]:
    """Map id -> (pi, r) from a plan CSV."""
    out = {}
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out[int(row["id"])] = (float(row["pi"]), int(row.get("r") or 0))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
    return out


def sample_plan(ids, pi, budget, rng: np.random.Generator, kind: str = "global",
                n_clip_low: int = 0, n_clip_high: int = 0) -> AnnotationPlan:
    pi = np.asarray(pi, dtype=float)
    r = rng.random(pi.size) < pi
    return AnnotationPlan(np.asarray(ids), pi, r, budget, kind, n_clip_low, n_clip_high)
