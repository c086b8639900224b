"""Two-batch, K-fold assignment and out-of-fold nuisance bookkeeping."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .nuisance import NuisanceError, NuisanceSet, NuisanceSpecs, fit_nuisances

PLANNING = "planning"
FINAL = "final"


@dataclass(frozen=True, eq=False)
class BatchFoldAssignment:
    batch: np.ndarray  # values in {1, 2}
    fold: np.ndarray  # values in 1..K
    kappa: float
    K: int
    seed: int

    @property
    def n(self) -> int:
        return int(self.batch.size)

    @property
    def n1(self) -> int:
        return int(np.sum(self.batch == 1))

    @property
    def realized_kappa(self) -> float:
        return self.n1 / self.n

    def to_dict(self) -> dict:
        return {"batch": self.batch.tolist(), "fold": self.fold.tolist(),
                "kappa": self.kappa, "K": self.K, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "BatchFoldAssignment":
        return cls(np.asarray(d["batch"], dtype=np.int64), np.asarray(d["fold"], dtype=np.int64),
                   float(d["kappa"]), int(d["K"]), int(d["seed"]))

    def equals(self, other: "BatchFoldAssignment") -> bool:
        return (np.array_equal(self.batch, other.batch) and np.array_equal(self.fold, other.fold)
                and self.kappa == other.kappa and self.K == other.K and self.seed == other.seed)

    def to_csv(self, path, ids) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "batch", "fold"])
            for i, b, f in zip(ids, self.batch, self.fold):
                w.writerow([int(i), int(b), int(f)])


def assign(n: int, K: int, kappa: float, seed: int, strata=None) -> BatchFoldAssignment:
    """Random split into batch 1 (``round(kappa * n)`` units) and batch 2, then K folds per batch.

    Fold sizes within a batch differ by at most one. With ``strata`` (e.g. the
    treatment arm) the batch split is done per stratum and fold labels are
    dealt round-robin over the stratum-sorted order, so each fold gets a near
    equal share of every stratum.
    """
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < 2 * K:
        raise ValueError(f"n={n} is too small for K={K} folds in two batches")
    rng = np.random.default_rng(seed)
    batch = np.full(n, 2, dtype=np.int64)
    fold = np.zeros(n, dtype=np.int64)
    if strata is None:
        perm = rng.permutation(n)
        n1 = int(round(kappa * n))
        n1 = min(max(n1, K), n - K)
        batch[perm[:n1]] = 1
        order = [perm[:n1], perm[n1:]]
    else:
        strata = np.asarray(strata)
        if strata.size != n:
            raise ValueError("strata length differs from n")
        b1, b2 = [], []
        for s in np.unique(strata):
            idx = rng.permutation(np.flatnonzero(strata == s))
            k1 = int(round(kappa * idx.size))
            b1.append(idx[:k1])
            b2.append(idx[k1:])
        b1, b2 = np.concatenate(b1), np.concatenate(b2)
        if b1.size < K or b2.size < K:
            raise ValueError("stratified split leaves fewer than K units in a batch")
        batch[b1] = 1
        order = [b1, b2]
    for idx in order:
        fold[idx] = np.arange(idx.size) % K + 1
    return BatchFoldAssignment(batch, fold, float(kappa), int(K), int(seed))


@dataclass
class FoldedNuisances:
    """One nuisance set per fold, each trained without that fold's units."""

    models: dict[int, NuisanceSet]
    assignment: BatchFoldAssignment
    stage: str
    train_index: dict[int, np.ndarray]

    def model_for(self, k: int) -> NuisanceSet:
        return self.models[k]

    def predict(self, ds: Dataset) -> dict[str, np.ndarray]:
        """Out-of-fold predictions: unit i is scored by the model excluding its fold."""
        out: dict[str, np.ndarray] = {}
        for k, model in self.models.items():
            rows = np.flatnonzero(self.assignment.fold == k)
            pred = model.predict(ds.subset(rows))
            for key, val in pred.items():
                if key not in out:
                    out[key] = np.empty(ds.n)
                out[key][rows] = val
        return out


def training_rows(assignment: BatchFoldAssignment, k: int, stage: str) -> np.ndarray:
    """Rows eligible to train the fold-k model at ``stage``."""
    outside = assignment.fold != k
    if stage == PLANNING:
        outside &= assignment.batch == 1
    elif stage != FINAL:
        raise ValueError(f"unknown stage {stage!r}")
    return np.flatnonzero(outside)


def fit_folded(ds: Dataset, assignment: BatchFoldAssignment, stage: str,
               specs: NuisanceSpecs = NuisanceSpecs(), seed: int = 0,
               with_rz: bool = False) -> FoldedNuisances:
    """Fit per-fold nuisances on the complement of each fold.

    Planning stage: batch-1 units outside fold k. Final stage: all units
    outside fold k. Outcome and variance models only see annotated units of
    that training set.
    """
    if assignment.n != ds.n:
        raise ValueError("assignment does not match dataset size")
    models, index = {}, {}
    for k in range(1, assignment.K + 1):
        rows = training_rows(assignment, k, stage)
        train = ds.subset(rows)
        try:
            models[k] = fit_nuisances(train, specs, seed=seed + 1000 * k, with_rz=with_rz)
        except NuisanceError as exc:
            raise NuisanceError(f"{stage} stage, fold {k}: {exc}") from None
        index[k] = rows
    return FoldedNuisances(models, assignment, stage, index)
