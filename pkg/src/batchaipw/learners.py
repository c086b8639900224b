"""Small supervised learners behind a uniform fit/predict interface.

Ridge, k-nearest-neighbours and IRLS logistic regression are implemented
directly in numpy. Tree ensembles delegate to scikit-learn random forests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, log_expit

log = logging.getLogger(__name__)

REGRESSORS = ("ridge", "knn", "forest", "constant")
CLASSIFIERS = ("logistic", "forest")


@dataclass(frozen=True)
class RegressorSpec:
    kind: str = "ridge"
    ridge_alpha: float = 1e-6
    k: int = 25
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 4
    min_split: int = 10

    def __post_init__(self):
        if self.kind not in REGRESSORS:
            raise ValueError(f"unknown regressor kind {self.kind!r}")
        if self.ridge_alpha < 0:
            raise ValueError("ridge_alpha must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_trees < 1 or self.min_leaf < 1 or self.min_split < 2:
            raise ValueError("tree ensemble hyperparameters out of range")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str = "logistic"
    tol: float = 1e-8
    max_iter: int = 100
    l2: float = 0.0
    clip_lo: float = 0.02
    clip_hi: float = 0.98
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 4

    def __post_init__(self):
        if self.kind not in CLASSIFIERS:
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if not 0.0 < self.clip_lo < self.clip_hi < 1.0:
            raise ValueError("classifier clip bounds must lie strictly inside (0, 1)")
        if self.tol <= 0 or self.max_iter < 1 or self.l2 < 0:
            raise ValueError("logistic solver settings out of range")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and targets differ in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    return X, y


def _as2d(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


class ConstantRegressor:
    def __init__(self, value: float):
        self.value = float(value)

    def predict(self, X):
        return np.full(_as2d(X).shape[0], self.value)


class RidgeRegressor:
    """Least squares with an unpenalised intercept."""

    def __init__(self, alpha: float = 0.0):
        self.alpha = alpha
        self.coef_ = None
        self.intercept_ = 0.0

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        xm = X.mean(axis=0)
        ym = y.mean()
        Xc = X - xm
        yc = y - ym
        if self.alpha > 0:
            p = X.shape[1]
            A = Xc.T @ Xc + self.alpha * np.eye(p)
            self.coef_ = np.linalg.solve(A, Xc.T @ yc)
        else:
            self.coef_ = np.linalg.lstsq(Xc, yc, rcond=None)[0]
        self.intercept_ = float(ym - xm @ self.coef_)
        return self

    def predict(self, X):
        return _as2d(X) @ self.coef_ + self.intercept_


class KNNRegressor:
    def __init__(self, k: int):
        self.k = k

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        self._y = y
        self._tree = cKDTree(X)
        self._k = min(self.k, X.shape[0])
        return self

    def predict(self, X):
        X = _as2d(X)
        if X.shape[0] == 0:
            return np.zeros(0)
        _, idx = self._tree.query(X, k=self._k)
        idx = np.asarray(idx).reshape(X.shape[0], self._k)
        return self._y[idx].mean(axis=1)


class ForestRegressor:
    def __init__(self, spec: RegressorSpec, seed: int):
        from sklearn.ensemble import RandomForestRegressor

        self._model = RandomForestRegressor(
            n_estimators=spec.n_trees, max_depth=spec.max_depth,
            min_samples_leaf=spec.min_leaf, min_samples_split=spec.min_split,
            random_state=seed, n_jobs=1,
        )

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        self._model.fit(X, y)
        return self

    def predict(self, X):
        X = _as2d(X)
        if X.shape[0] == 0:
            return np.zeros(0)
        return self._model.predict(X)


def fit_regressor(spec: RegressorSpec, features, targets, seed: int = 0):
    """Fit a regressor; the returned object exposes ``predict(X)``."""
    X, y = _check_xy(features, targets)
    if spec.kind == "ridge":
        return RidgeRegressor(spec.ridge_alpha).fit(X, y)
    if spec.kind == "knn":
        return KNNRegressor(spec.k).fit(X, y)
    if spec.kind == "forest":
        return ForestRegressor(spec, seed).fit(X, y)
    return ConstantRegressor(y.mean())


# ---------------------------------------------------------------------------
# logistic regression


def _design(X):
    X = _as2d(X)
    return np.hstack([np.ones((X.shape[0], 1)), X])


def log_likelihood(beta, X, y, l2: float = 0.0) -> float:
    """Mean Bernoulli log-likelihood of a logistic model (intercept first in ``beta``).

    The optional ridge term penalises slopes only.
    """
    A = _design(X)
    eta = A @ beta
    ll = np.mean(y * log_expit(eta) + (1 - y) * log_expit(-eta))
    return float(ll - 0.5 * l2 * np.sum(beta[1:] ** 2) / A.shape[0])


def log_likelihood_grad(beta, X, y, l2: float = 0.0) -> np.ndarray:
    A = _design(X)
    g = A.T @ (y - expit(A @ beta)) / A.shape[0]
    g[1:] -= l2 * beta[1:] / A.shape[0]
    return g


class LogisticClassifier:
    """Logistic regression fitted by iteratively reweighted least squares.

    Newton steps are halved until the log-likelihood does not decrease. On
    separable data the iterate diverges; the best iterate is kept and
    ``converged`` stays False.
    """

    def __init__(self, tol: float = 1e-8, max_iter: int = 100, l2: float = 0.0):
        self.tol = tol
        self.max_iter = max_iter
        self.l2 = l2
        self.coef_ = None
        self.converged = False
        self.separated = False
        self.n_iter = 0
        self.grad_norm = np.inf

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        A = _design(X)
        n, p = A.shape
        beta = np.zeros(p)
        ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        beta[0] = np.log(ybar / (1 - ybar))
        pen = np.full(p, self.l2 / n)
        pen[0] = 0.0
        ll = log_likelihood(beta, X, y, self.l2)
        g = log_likelihood_grad(beta, X, y, self.l2)
        it = 0
        while it < self.max_iter and np.linalg.norm(g) > self.tol:
            w = expit(A @ beta)
            w = w * (1 - w)
            H = (A * w[:, None]).T @ A / n + np.diag(pen)
            try:
                step = np.linalg.solve(H + 1e-12 * np.eye(p), g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, g, rcond=None)[0]
            t = 1.0
            cand = beta + step
            ll_c = log_likelihood(cand, X, y, self.l2)
            while ll_c < ll and t > 1e-10:
                t *= 0.5
                cand = beta + t * step
                ll_c = log_likelihood(cand, X, y, self.l2)
            if ll_c < ll:
                break
            beta, ll = cand, ll_c
            g = log_likelihood_grad(beta, X, y, self.l2)
            it += 1
        eta = A @ beta
        # perfect linear separation: no finite maximiser exists, the fit diverges
        self.separated = bool(self.l2 == 0 and 0 < y.sum() < n
                              and np.all(eta[y == 1] > 0) and np.all(eta[y == 0] < 0))
        self.converged = bool(np.linalg.norm(g) <= self.tol) and not self.separated
        self.coef_ = beta
        self.n_iter = it
        self.grad_norm = float(np.linalg.norm(g))
        if not self.converged:
            log.debug("logistic fit stopped after %d iterations (|grad|=%.3g)", it, self.grad_norm)
        return self

    def predict_proba(self, X):
        return expit(_design(X) @ self.coef_)


class ForestClassifier:
    def __init__(self, spec: ClassifierSpec, seed: int):
        from sklearn.ensemble import RandomForestClassifier

        self._model = RandomForestClassifier(
            n_estimators=spec.n_trees, max_depth=spec.max_depth,
            min_samples_leaf=spec.min_leaf, random_state=seed, n_jobs=1,
        )
        self.converged = True

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        self._classes = np.unique(y)
        self._model.fit(X, y.astype(int))
        return self

    def predict_proba(self, X):
        X = _as2d(X)
        if len(self._classes) == 1:
            return np.full(X.shape[0], float(self._classes[0]))
        proba = self._model.predict_proba(X)
        return proba[:, list(self._model.classes_).index(1)]


class ClippedClassifier:
    """Wraps a probabilistic classifier and clips its output."""

    def __init__(self, inner, lo: float, hi: float):
        self.inner = inner
        self.lo = lo
        self.hi = hi

    @property
    def converged(self) -> bool:
        return getattr(self.inner, "converged", True)

    def predict_raw(self, X):
        return self.inner.predict_proba(X)

    def predict_proba(self, X):
        return np.clip(self.inner.predict_proba(X), self.lo, self.hi)


def fit_classifier(spec: ClassifierSpec, features, labels, seed: int = 0) -> ClippedClassifier:
    X, y = _check_xy(features, labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("classifier labels must be 0/1")
    if spec.kind == "logistic":
        inner = LogisticClassifier(spec.tol, spec.max_iter, spec.l2).fit(X, y)
    else:
        inner = ForestClassifier(spec, seed).fit(X, y)
    return ClippedClassifier(inner, spec.clip_lo, spec.clip_hi)
