"""Observation records, the dataset container, CSV I/O and overlap diagnostics."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


BINARY = "binary"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class Unit:
    id: int
    covariates: tuple[float, ...]
    treatment: float
    annotated: bool
    outcome: float | None = None
    context_features: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.annotated != (self.outcome is not None):
            raise DataError(f"unit {self.id}: outcome must be present iff annotated")


@dataclass(frozen=True)
class ClipConfig:
    """Positivity bounds applied to fitted probabilities."""

    e_lo: float = 0.02
    e_hi: float = 0.98
    pi_floor: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.e_lo < self.e_hi < 1.0:
            raise ValueError("propensity clip bounds must satisfy 0 < lo < hi < 1")
        if not 0.0 <= self.pi_floor < 1.0:
            raise ValueError("pi_floor must lie in [0, 1)")


@dataclass(frozen=True)
class BudgetSpec:
    kind: str = "global"
    B: float | None = None
    B0: float | None = None
    B1: float | None = None
    z0: float | None = None
    h: float | None = None

    def __post_init__(self):
        if self.kind not in ("global", "per-arm", "continuous-local"):
            raise ValueError(f"unknown budget kind {self.kind!r}")
        if self.kind == "per-arm":
            needed = {"B0": self.B0, "B1": self.B1}
        else:
            needed = {"B": self.B}
        if self.kind == "continuous-local":
            if self.z0 is None or self.h is None or not self.h > 0:
                raise ValueError("continuous-local budget needs z0 and h > 0")
        for name, value in needed.items():
            if value is None or not 0.0 < value <= 1.0:
                raise ValueError(f"budget {name} must lie in (0, 1], got {value}")

    def arm_budget(self, z: int) -> float:
        if self.kind == "per-arm":
            return float(self.B1 if z == 1 else self.B0)
        return float(self.B)

    @property
    def overall(self) -> float:
        """Nominal budget used for batch-1 sampling when a single number is needed."""
        if self.kind == "per-arm":
            return max(self.B0, self.B1)
        return float(self.B)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, immutable collection of units.

    ``y`` holds NaN wherever ``r`` is False, so an unrevealed outcome can never
    be stored alongside ``annotated=False``.
    """

    ids: np.ndarray
    X: np.ndarray
    z: np.ndarray
    r: np.ndarray
    y: np.ndarray
    C: np.ndarray | None = None
    mode: str = BINARY

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        n = ids.shape[0]
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(n, -1) if n else X.reshape(0, 0)
        if X.shape[0] != n:
            raise DataError("covariate rows do not match number of ids")
        z = np.asarray(self.z, dtype=float).reshape(-1)
        r = np.asarray(self.r, dtype=bool).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (z.shape[0] == r.shape[0] == y.shape[0] == n):
            raise DataError("column lengths differ")
        if len(np.unique(ids)) != n:
            raise DataError("unit ids must be unique")
        if self.mode not in (BINARY, CONTINUOUS):
            raise DataError(f"unknown mode {self.mode!r}")
        if not np.all(np.isfinite(X)):
            raise DataError("covariates must be finite")
        if not np.all(np.isfinite(z)):
            raise DataError("treatments must be finite")
        if self.mode == BINARY and not np.all((z == 0) | (z == 1)):
            raise DataError("binary mode requires treatments in {0, 1}")
        if np.any(r & ~np.isfinite(y)):
            raise DataError("annotated units need a finite outcome")
        if np.any(~r & ~np.isnan(y)):
            raise DataError("unannotated units must not carry an outcome")
        C = self.C
        if C is not None:
            C = np.asarray(C, dtype=float)
            if C.ndim == 1:
                C = C.reshape(n, -1)
            if C.shape[0] != n:
                raise DataError("context feature rows do not match number of ids")
            if C.shape[1] == 0:
                C = None
        object.__setattr__(self, "ids", _readonly(ids))
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "z", _readonly(z))
        object.__setattr__(self, "r", _readonly(r))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "C", None if C is None else _readonly(C))

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    @property
    def d(self) -> int:
        return int(self.X.shape[1]) if self.X.ndim == 2 else 0

    @property
    def m(self) -> int:
        return 0 if self.C is None else int(self.C.shape[1])

    def __len__(self) -> int:
        return self.n

    @property
    def arm(self) -> np.ndarray:
        """Integer treatment arm (binary mode only)."""
        return self.z.astype(np.int64)

    @property
    def units(self) -> list[Unit]:
        return list(self.iter_units())

    def iter_units(self) -> Iterator[Unit]:
        for i in range(self.n):
            yield Unit(
                id=int(self.ids[i]),
                covariates=tuple(float(v) for v in self.X[i]),
                treatment=int(self.z[i]) if self.mode == BINARY else float(self.z[i]),
                annotated=bool(self.r[i]),
                outcome=float(self.y[i]) if self.r[i] else None,
                context_features=None if self.C is None else tuple(float(v) for v in self.C[i]),
            )

    @classmethod
    def from_units(cls, units: Sequence[Unit], mode: str = BINARY, d: int | None = None) -> "Dataset":
        if not units:
            d = d or 0
            return cls(np.zeros(0, np.int64), np.zeros((0, d)), np.zeros(0), np.zeros(0, bool),
                       np.zeros(0), None, mode)
        d0 = len(units[0].covariates)
        if any(len(u.covariates) != d0 for u in units):
            raise DataError("inconsistent covariate arity")
        has_c = units[0].context_features is not None
        if any((u.context_features is not None) != has_c for u in units):
            raise DataError("context features must be present for all units or none")
        return cls(
            ids=np.array([u.id for u in units]),
            X=np.array([u.covariates for u in units], dtype=float).reshape(len(units), d0),
            z=np.array([u.treatment for u in units], dtype=float),
            r=np.array([u.annotated for u in units]),
            y=np.array([np.nan if u.outcome is None else u.outcome for u in units]),
            C=np.array([u.context_features for u in units], dtype=float) if has_c else None,
            mode=mode,
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.ids[idx], self.X[idx], self.z[idx], self.r[idx], self.y[idx],
                       None if self.C is None else self.C[idx], self.mode)

    def redacted(self) -> "Dataset":
        """Copy with every outcome removed (nothing annotated)."""
        return Dataset(self.ids, self.X, self.z, np.zeros(self.n, bool), np.full(self.n, np.nan),
                       self.C, self.mode)

    def with_labels(self, labels: Mapping[int, float]) -> "Dataset":
        """Copy where the given ids are annotated with the given outcomes.

        Previously revealed outcomes are kept; re-labelling an id with a
        different value is an error.
        """
        pos = self.index_of([int(k) for k in labels])
        r = self.r.copy()
        y = self.y.copy()
        for p, val in zip(pos, labels.values()):
            val = float(val)
            if r[p] and y[p] != val:
                raise DataError(f"unit {self.ids[p]} already carries a different outcome")
            r[p] = True
            y[p] = val
        return Dataset(self.ids, self.X, self.z, r, y, self.C, self.mode)

    def index_of(self, ids) -> np.ndarray:
        lookup = {int(v): i for i, v in enumerate(self.ids)}
        try:
            return np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown unit id {exc.args[0]}") from None

    def features(self, use_context: bool = False) -> np.ndarray:
        if use_context and self.C is not None:
            return np.hstack([self.X, self.C])
        return np.asarray(self.X)

    def fingerprint(self, include_outcomes: bool = False) -> str:
        """SHA-256 over ids, covariates, treatments and context features."""
        h = hashlib.sha256()
        h.update(self.mode.encode())
        for a in (self.ids, self.X, self.z) + (() if self.C is None else (self.C,)):
            h.update(np.ascontiguousarray(a).tobytes())
        if include_outcomes:
            h.update(self.r.tobytes())
            h.update(np.where(self.r, self.y, 0.0).tobytes())
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        if self.mode != other.mode or self.n != other.n:
            return False
        same_c = (self.C is None and other.C is None) or (
            self.C is not None and other.C is not None and np.array_equal(self.C, other.C))
        return bool(
            same_c
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.y, other.y, equal_nan=True)
        )


# ---------------------------------------------------------------------------
# CSV I/O

DEFAULT_SCHEMA = {"id": "id", "z": "z", "r": "r", "y": "y", "x_prefix": "x", "c_prefix": "c"}


def _fmt(v: float) -> str:
    # repr gives the shortest string that round-trips exactly
    v = float(v)
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _prefixed(header: Sequence[str], prefix: str) -> list[str]:
    cols = [(int(h[len(prefix):]), h) for h in header
            if h.startswith(prefix) and h[len(prefix):].isdigit()]
    return [h for _, h in sorted(cols)]


def load_dataset(path, schema: Mapping[str, object] | None = None, mode: str = BINARY) -> Dataset:
    """Read a dataset CSV.

    ``schema`` maps the canonical names ``id``, ``z``, ``r``, ``y`` to column
    names; covariates and context features are either listed explicitly
    (``covariates``/``context`` keys) or found by prefix (``x_prefix``,
    ``c_prefix``). An empty outcome cell means the unit is unannotated. When
    the ``r`` column is absent, annotation is inferred from the outcome cell.
    """
    sch = dict(DEFAULT_SCHEMA)
    if schema:
        sch.update(schema)
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)

    x_cols = list(sch.get("covariates") or _prefixed(header, str(sch["x_prefix"])))
    c_cols = list(sch.get("context") or _prefixed(header, str(sch["c_prefix"])))
    for col in [sch["id"], sch["z"], sch["y"], *x_cols, *c_cols]:
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    pos = {h: i for i, h in enumerate(header)}
    has_r = sch["r"] in pos

    ids, X, z, r, y, C = [], [], [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
        try:
            ids.append(int(row[pos[sch["id"]]]))
            X.append([float(row[pos[c]]) for c in x_cols])
            C.append([float(row[pos[c]]) for c in c_cols])
            zv = float(row[pos[sch["z"]]])
            ycell = row[pos[sch["y"]]].strip()
            yv = float(ycell) if ycell else math.nan
            if has_r:
                rcell = row[pos[sch["r"]]].strip()
                rv = bool(int(float(rcell))) if rcell else not math.isnan(yv)
            else:
                rv = not math.isnan(yv)
        except ValueError as exc:
            raise DataError(f"{path}: row {lineno}: {exc}") from None
        if mode == BINARY and zv not in (0.0, 1.0):
            raise DataError(f"{path}: row {lineno}: non-binary treatment {zv} in binary mode")
        if rv and math.isnan(yv):
            raise DataError(f"{path}: row {lineno}: r=1 but outcome is empty")
        if not rv and not math.isnan(yv):
            # an outcome without r=1 is treated as not revealed
            yv = math.nan
        z.append(zv)
        r.append(rv)
        y.append(yv)

    n, d = len(ids), len(x_cols)
    try:
        return Dataset(
            ids=np.array(ids, dtype=np.int64),
            X=np.array(X, dtype=float).reshape(n, d),
            z=np.array(z, dtype=float),
            r=np.array(r, dtype=bool),
            y=np.array(y, dtype=float),
            C=np.array(C, dtype=float).reshape(n, len(c_cols)) if c_cols else None,
            mode=mode,
        )
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as CSV; unannotated outcomes become empty cells."""
    header = (["id"] + [f"x{j + 1}" for j in range(ds.d)] + ["z", "r", "y"]
              + [f"c{j + 1}" for j in range(ds.m)])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [str(int(ds.ids[i]))]
            row += [_fmt(v) for v in ds.X[i]]
            row += [_fmt(ds.z[i]), "1" if ds.r[i] else "0", _fmt(ds.y[i]) if ds.r[i] else ""]
            if ds.C is not None:
                row += [_fmt(v) for v in ds.C[i]]
            w.writerow(row)


# ---------------------------------------------------------------------------
# overlap diagnostics


@dataclass
class OverlapReport:
    e_min: float
    e_max: float
    pi_min: float
    n_e_below: int
    n_e_above: int
    n_pi_below: int
    arm_counts: dict[int, int] = field(default_factory=dict)
    annotated_counts: dict[int, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.n_e_below == 0 and self.n_e_above == 0 and self.n_pi_below == 0

    def to_dict(self) -> dict:
        return {
            "e_min": self.e_min, "e_max": self.e_max, "pi_min": self.pi_min,
            "n_e_below": self.n_e_below, "n_e_above": self.n_e_above,
            "n_pi_below": self.n_pi_below,
            "arm_counts": {str(k): v for k, v in self.arm_counts.items()},
            "annotated_counts": {str(k): v for k, v in self.annotated_counts.items()},
        }


def diagnose_overlap(
    ds: Dataset,
    e_hat: Callable[[np.ndarray], np.ndarray],
    pi_hat: Callable[[np.ndarray, np.ndarray], np.ndarray],
    bounds: ClipConfig = ClipConfig(),
) -> OverlapReport:
    """Report how close fitted treatment and annotation probabilities get to 0/1.

    ``e_hat(X)`` returns P(Z=1 | X) before any clipping; ``pi_hat(z, X)``
    returns the annotation probability of each unit's own arm.
    """
    e = np.clip(np.asarray(e_hat(ds.X), dtype=float), 0.0, 1.0)
    pi = np.clip(np.asarray(pi_hat(ds.z, ds.X), dtype=float), 0.0, 1.0)
    arms = {} if ds.mode != BINARY else {
        a: int(np.sum(ds.arm == a)) for a in (0, 1)}
    annotated = {} if ds.mode != BINARY else {
        a: int(np.sum((ds.arm == a) & ds.r)) for a in (0, 1)}
    empty = e.size == 0
    return OverlapReport(
        e_min=float("nan") if empty else float(e.min()),
        e_max=float("nan") if empty else float(e.max()),
        pi_min=float("nan") if empty else float(pi.min()),
        n_e_below=int(np.sum(e < bounds.e_lo)),
        n_e_above=int(np.sum(e > bounds.e_hi)),
        n_pi_below=int(np.sum(pi < bounds.pi_floor)),
        arm_counts=arms,
        annotated_counts=annotated,
    )
