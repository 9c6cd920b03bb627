"""Stratified, optionally subject-grouped k-fold plans with a seeded deterministic assignment."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from safn.core import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: tuple[tuple[int, int], ...]
    grouped: bool

    @property
    def fold_of(self) -> np.ndarray:
        out = np.empty(len(self.assignments), dtype=np.int64)
        for row, fold in self.assignments:
            out[row] = fold
        return out

    def validation_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def training_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= fold < self.k:
            raise DataError(f"Fold index {fold} outside [0, {self.k})")
        fold_of = self.fold_of
        return np.flatnonzero(fold_of != fold), np.flatnonzero(fold_of == fold)


def make_folds(
    labels: Sequence[int] | np.ndarray,
    subject_ids: Sequence[str] | None,
    k: int,
    seed: int,
    *,
    grouped: bool = True,
) -> FoldPlan:
    """Stratified (optionally subject-grouped) k-fold assignment.

    Groups are visited largest first, then by majority label, then in a
    seeded random order; each goes to the fold with the largest class
    deficit, ties broken by smaller fold size and then lower fold index.
    Without grouping every row is its own group, which keeps per-fold class
    counts within one of each other.
    """
    y = np.asarray(labels, dtype=np.int64)
    n = int(y.shape[0])
    if k < 2:
        raise DataError(f"k must be at least 2, got {k}")
    if n == 0:
        raise DataError("Cannot split an empty dataset")
    if not np.isin(y, (0, 1)).all():
        raise DataError("Labels must be 0/1")

    if grouped and subject_ids is not None:
        if len(subject_ids) != n:
            raise DataError(f"Got {len(subject_ids)} subject IDs for {n} labels")
        members: dict[str, list[int]] = {}
        for row, sid in enumerate(subject_ids):
            members.setdefault(str(sid), []).append(row)
        groups = list(members.values())
    else:
        groups = [[row] for row in range(n)]

    counts = np.array([[np.sum(y[g] == 0), np.sum(y[g] == 1)] for g in groups], dtype=np.int64)
    sizes = counts.sum(axis=1)
    majority = (counts[:, 1] >= counts[:, 0]).astype(np.int64)

    for cls in (0, 1):
        available = int(np.sum(majority == cls))
        if available < k:
            raise DataError(f"Class {cls} has {available} {'groups' if grouped else 'samples'}; need at least k={k}")

    targets = np.array([np.sum(y == 0), np.sum(y == 1)], dtype=np.float64) / k
    tiebreak = np.random.default_rng(seed).permutation(len(groups))
    order = sorted(range(len(groups)), key=lambda g: (-int(sizes[g]), int(majority[g]), int(tiebreak[g])))

    fold_counts = np.zeros((k, 2), dtype=np.float64)
    fold_sizes = np.zeros(k, dtype=np.int64)
    fold_of = np.empty(n, dtype=np.int64)
    for g in order:
        deficit = (targets[None, :] - fold_counts) @ counts[g].astype(np.float64)
        candidates = np.flatnonzero(deficit == deficit.max())
        smallest = candidates[fold_sizes[candidates] == fold_sizes[candidates].min()]
        fold = int(smallest[0])
        fold_counts[fold] += counts[g]
        fold_sizes[fold] += sizes[g]
        fold_of[groups[g]] = fold

    logger.debug("Fold sizes: %s", fold_sizes.tolist())
    return FoldPlan(k=k, assignments=tuple((row, int(fold_of[row])) for row in range(n)), grouped=grouped)
