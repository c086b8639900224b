"""Nuisance fitting: outcome, conditional variance, propensity and joint RZ score."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .data import BINARY, ClipConfig, Dataset, DataError
from .learners import ClassifierSpec, RegressorSpec, fit_classifier, fit_regressor

SIGMA2_FLOOR = 1e-3


class NuisanceError(DataError):
    """A nuisance model cannot be fitted on the available data."""


@dataclass(frozen=True)
class NuisanceSpecs:
    """Learner choices for every nuisance function."""

    outcome: RegressorSpec = RegressorSpec("ridge", ridge_alpha=1e-6)
    # squared residuals are noisy; heavy shrinkage towards a per-arm constant
    variance: RegressorSpec = RegressorSpec("ridge", ridge_alpha=100.0)
    propensity: ClassifierSpec = ClassifierSpec()
    rz: ClassifierSpec = ClassifierSpec(clip_lo=0.01, clip_hi=0.999)
    use_context: bool = False
    ensemble_context: bool = False
    sigma2_floor: float = SIGMA2_FLOOR

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NuisanceSpecs":
        return cls(
            outcome=RegressorSpec(**d["outcome"]),
            variance=RegressorSpec(**d["variance"]),
            propensity=ClassifierSpec(**d["propensity"]),
            rz=ClassifierSpec(**d["rz"]),
            use_context=bool(d.get("use_context", False)),
            ensemble_context=bool(d.get("ensemble_context", False)),
            sigma2_floor=float(d.get("sigma2_floor", SIGMA2_FLOOR)),
        )


class EnsembleRegressor:
    """Convex combination of a covariate-only and a covariate+context model."""

    def __init__(self, tabular, contextual, weight: float, d: int):
        self.tabular = tabular
        self.contextual = contextual
        self.weight = weight
        self.d = d

    def predict(self, F):
        F = np.asarray(F, dtype=float)
        return ((1 - self.weight) * self.tabular.predict(F[:, : self.d])
                + self.weight * self.contextual.predict(F))


class FlooredRegressor:
    def __init__(self, inner, floor: float):
        self.inner = inner
        self.floor = floor

    def predict(self, X):
        return np.maximum(self.inner.predict(X), self.floor)


class PropensityModel:
    """Clipped P(Z=1 | X); ``e(0, X)`` is its complement."""

    def __init__(self, clf):
        self.clf = clf

    @property
    def converged(self) -> bool:
        return self.clf.converged

    def e1(self, X) -> np.ndarray:
        return self.clf.predict_proba(X)

    def e(self, z, X) -> np.ndarray:
        e1 = self.e1(X)
        return e1 if int(z) == 1 else 1.0 - e1

    def raw(self, X) -> np.ndarray:
        return self.clf.predict_raw(X)


class RZModel:
    """Joint scores q_z(X) ~ P(Z=z, R=1 | X), rescaled so q_1 + q_0 <= 1."""

    def __init__(self, clfs: dict[int, object]):
        self.clfs = clfs

    def both(self, X) -> tuple[np.ndarray, np.ndarray]:
        q1 = self.clfs[1].predict_proba(X)
        q0 = self.clfs[0].predict_proba(X)
        s = q1 + q0
        scale = np.where(s > 1.0, 1.0 / s, 1.0)
        return q1 * scale, q0 * scale

    def q(self, z, X) -> np.ndarray:
        q1, q0 = self.both(X)
        return q1 if int(z) == 1 else q0


@dataclass
class NuisanceSet:
    """Fitted nuisance functions for both arms."""

    mu: dict[int, object]
    sigma2: dict[int, object]
    propensity: PropensityModel
    rz: RZModel | None = None
    use_context: bool = False
    train_ids: dict[str, np.ndarray] = field(default_factory=dict)

    def _feat(self, X, C=None):
        if self.use_context:
            if C is None:
                raise ValueError("outcome model was fitted with context features")
            return np.hstack([np.asarray(X), np.asarray(C)])
        return np.asarray(X)

    def mu_hat(self, z, X, C=None) -> np.ndarray:
        return self.mu[int(z)].predict(self._feat(X, C))

    def sigma2_hat(self, z, X) -> np.ndarray:
        return self.sigma2[int(z)].predict(X)

    def e_hat(self, z, X) -> np.ndarray:
        return self.propensity.e(z, X)

    def q_hat(self, z, X) -> np.ndarray:
        if self.rz is None:
            raise ValueError("no joint RZ score was fitted")
        return self.rz.q(z, X)

    def predict(self, ds: Dataset) -> dict[str, np.ndarray]:
        """All nuisance predictions on ``ds`` as a dict of arrays."""
        out = {
            "mu1": self.mu_hat(1, ds.X, ds.C), "mu0": self.mu_hat(0, ds.X, ds.C),
            "s1": self.sigma2_hat(1, ds.X), "s0": self.sigma2_hat(0, ds.X),
            "e1": self.e_hat(1, ds.X),
        }
        if self.rz is not None:
            out["q1"], out["q0"] = self.rz.both(ds.X)
        return out


def _require_binary(ds: Dataset):
    if ds.mode != BINARY:
        raise NuisanceError("binary-treatment nuisances need a binary-mode dataset")


def _arm_rows(ds: Dataset, z: int) -> np.ndarray:
    rows = np.flatnonzero((ds.arm == z) & ds.r)
    if rows.size == 0:
        raise NuisanceError(f"arm {z} has no annotated units")
    return rows


def _fit_ensemble(ds: Dataset, rows, spec, seed, holdout: float = 0.2):
    F_tab = ds.X[rows]
    F_ctx = ds.features(True)[rows]
    y = ds.y[rows]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(rows.size)
    n_val = int(round(holdout * rows.size))
    if n_val < 1 or rows.size - n_val < 1:
        w = 0.5
    else:
        val, tr = perm[:n_val], perm[n_val:]
        tab = fit_regressor(spec, F_tab[tr], y[tr], seed)
        ctx = fit_regressor(spec, F_ctx[tr], y[tr], seed)
        pt, pc = tab.predict(F_tab[val]), ctx.predict(F_ctx[val])
        grid = np.round(np.linspace(0.0, 1.0, 11), 10)
        mse = [np.mean(((1 - g) * pt + g * pc - y[val]) ** 2) for g in grid]
        w = float(grid[int(np.argmin(mse))])
    return EnsembleRegressor(fit_regressor(spec, F_tab, y, seed),
                             fit_regressor(spec, F_ctx, y, seed), w, ds.d)


def fit_outcome_models(ds: Dataset, spec: RegressorSpec, use_context: bool = False,
                       seed: int = 0, ensemble: bool = False) -> dict[int, object]:
    """Per-arm regressions of Y on X (plus context columns) over annotated units.

    With ``ensemble`` the context model is blended with a covariate-only model
    using the convex weight (grid step 0.1) that minimises squared error on a
    random 20% split of the arm's annotated units.
    """
    _require_binary(ds)
    use_context = use_context and ds.C is not None
    mu = {}
    for z in (0, 1):
        rows = _arm_rows(ds, z)
        if use_context and ensemble:
            mu[z] = _fit_ensemble(ds, rows, spec, seed + z)
        else:
            mu[z] = fit_regressor(spec, ds.features(use_context)[rows], ds.y[rows], seed + z)
    return mu


def fit_variance_models(ds: Dataset, mu: dict[int, object], spec: RegressorSpec,
                        floor: float = SIGMA2_FLOOR, seed: int = 0,
                        use_context: bool = False) -> dict[int, FlooredRegressor]:
    """Regress squared residuals (Y - mu_z)^2 on X within each arm, floored at ``floor``."""
    _require_binary(ds)
    if not floor > 0:
        raise ValueError("variance floor must be positive")
    use_context = use_context and ds.C is not None
    out = {}
    for z in (0, 1):
        rows = _arm_rows(ds, z)
        resid2 = (ds.y[rows] - mu[z].predict(ds.features(use_context)[rows])) ** 2
        out[z] = FlooredRegressor(fit_regressor(spec, ds.X[rows], resid2, seed + 10 + z), floor)
    return out


def fit_propensity(ds: Dataset, spec: ClassifierSpec = ClassifierSpec(), seed: int = 0) -> PropensityModel:
    """Classifier for P(Z=1 | X) on every unit (annotation status is irrelevant)."""
    _require_binary(ds)
    if ds.n == 0 or np.all(ds.arm == ds.arm[0]):
        raise NuisanceError("propensity fitting needs units from both arms")
    return PropensityModel(fit_classifier(spec, ds.X, ds.arm, seed + 20))


def fit_rz_score(ds: Dataset, spec: ClassifierSpec = ClassifierSpec(clip_lo=0.01, clip_hi=0.999),
                 seed: int = 0) -> RZModel:
    """One classifier per arm for the joint indicator 1[Z=z, R=1]."""
    _require_binary(ds)
    clfs = {}
    for z in (0, 1):
        label = ((ds.arm == z) & ds.r).astype(float)
        if not label.any():
            raise NuisanceError(f"arm {z} has no annotated units")
        clfs[z] = fit_classifier(spec, ds.X, label, seed + 30 + z)
    return RZModel(clfs)


def fit_nuisances(ds: Dataset, specs: NuisanceSpecs = NuisanceSpecs(), seed: int = 0,
                  propensity_ds: Dataset | None = None, with_rz: bool = False) -> NuisanceSet:
    """Fit the full nuisance set.

    Outcome and variance models use the annotated units of ``ds``; the
    propensity (and RZ score) use every unit of ``propensity_ds`` (defaults to
    ``ds``).
    """
    pds = ds if propensity_ds is None else propensity_ds
    mu = fit_outcome_models(ds, specs.outcome, specs.use_context, seed, specs.ensemble_context)
    s2 = fit_variance_models(ds, mu, specs.variance, specs.sigma2_floor, seed, specs.use_context)
    prop = fit_propensity(pds, specs.propensity, seed)
    rz = fit_rz_score(pds, specs.rz, seed) if with_rz else None
    return NuisanceSet(
        mu=mu, sigma2=s2, propensity=prop, rz=rz,
        use_context=specs.use_context and ds.C is not None,
        train_ids={"outcome": ds.ids[ds.r].copy(), "propensity": pds.ids.copy()},
    )


class GaussianDoseModel:
    """Generalized propensity: Z | X ~ N(a + X b, s^2), fitted by least squares."""

    def __init__(self, reg, scale: float):
        self.reg = reg
        self.scale = scale

    def density(self, z, X) -> np.ndarray:
        m = self.reg.predict(np.asarray(X, dtype=float))
        u = (np.asarray(z, dtype=float) - m) / self.scale
        return np.exp(-0.5 * u * u) / (self.scale * np.sqrt(2.0 * np.pi))


@dataclass
class ContinuousNuisances:
    """Outcome, variance and dose-density models for a continuous treatment.

    Outcome and variance regressions take ``[X, z]`` as features.
    """

    mu: object
    sigma2_model: FlooredRegressor
    dose: GaussianDoseModel

    def mu_hat(self, z, X) -> np.ndarray:
        return self.mu.predict(np.column_stack([X, z]))

    def sigma2(self, z, X) -> np.ndarray:
        return self.sigma2_model.predict(np.column_stack([X, z]))

    def e(self, z, X) -> np.ndarray:
        return self.dose.density(z, X)


def fit_continuous_nuisances(ds: Dataset, specs: NuisanceSpecs = NuisanceSpecs(),
                             seed: int = 0) -> ContinuousNuisances:
    if ds.mode == BINARY:
        raise NuisanceError("continuous nuisances need a continuous-mode dataset")
    rows = np.flatnonzero(ds.r)
    if rows.size < 2:
        raise NuisanceError("need at least two annotated units")
    F = np.column_stack([ds.X, ds.z])
    mu = fit_regressor(specs.outcome, F[rows], ds.y[rows], seed)
    resid2 = (ds.y[rows] - mu.predict(F[rows])) ** 2
    s2 = FlooredRegressor(fit_regressor(specs.variance, F[rows], resid2, seed + 10), specs.sigma2_floor)
    reg = fit_regressor(RegressorSpec("ridge", ridge_alpha=1e-6), ds.X, ds.z, seed + 20)
    scale = float(np.sqrt(np.mean((ds.z - reg.predict(ds.X)) ** 2)))
    if not scale > 0:
        raise NuisanceError("treatment is a deterministic function of the covariates")
    return ContinuousNuisances(mu, s2, GaussianDoseModel(reg, scale))
