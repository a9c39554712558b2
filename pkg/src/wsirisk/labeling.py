"""Risk categories, patch labels and patient-level stratified folds."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable

import numpy as np

from .slide_core import SlideManifestEntry

CANCER_FRACTION_CUTOFF = 0.25
LOW_UPPER = 17  # rs <= 17 is Low
INTERMEDIATE_UPPER = 31  # 18..31 is Intermediate


class RiskCategory(IntEnum):
    BENIGN = 0
    LOW = 1
    INTERMEDIATE = 2
    HIGH = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


RISK_CLASSES = (RiskCategory.LOW, RiskCategory.INTERMEDIATE, RiskCategory.HIGH)


def bin_rs(rs: int) -> RiskCategory:
    """GHI-RS bins: <18 Low, 18..31 Intermediate, >31 High."""
    if isinstance(rs, bool) or int(rs) != rs or not 0 <= rs <= 100:
        raise ValueError(f"recurrence score must be an integer in 0..100, got {rs!r}")
    if rs <= LOW_UPPER:
        return RiskCategory.LOW
    if rs <= INTERMEDIATE_UPPER:
        return RiskCategory.INTERMEDIATE
    return RiskCategory.HIGH


def cancer_fraction(mask_window: np.ndarray) -> float:
    mask_window = np.asarray(mask_window)
    return float(np.count_nonzero(mask_window)) / mask_window.size


def label_patch(fraction: float, slide_rs: int) -> RiskCategory:
    # Exactly 25% cancer counts as a cancer patch.
    if fraction < CANCER_FRACTION_CUTOFF:
        return RiskCategory.BENIGN
    return bin_rs(slide_rs)


@dataclass
class FoldSplit:
    k: int
    assignment: dict[str, int]

    def fold_of(self, patient_id: str) -> int:
        return self.assignment[patient_id]

    def patients(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "assignment": dict(sorted(self.assignment.items()))}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> FoldSplit:
        raw = json.loads(text)
        assignment = {str(p): int(f) for p, f in raw["assignment"].items()}
        k = int(raw["k"])
        if any(not 0 <= f < k for f in assignment.values()):
            raise ValueError("fold index out of range")
        return cls(k, assignment)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> FoldSplit:
        return cls.from_json(Path(path).read_text())


def patient_categories(manifest: Iterable[SlideManifestEntry]) -> dict[str, RiskCategory]:
    """Stratification key per patient: the highest category across their slides."""
    cats: dict[str, RiskCategory] = {}
    for entry in manifest:
        cat = bin_rs(entry.rs_score)
        cats[entry.patient_id] = max(cats.get(entry.patient_id, cat), cat)
    return cats


def make_folds(manifest: Iterable[SlideManifestEntry], k: int = 5, seed: int = 0) -> FoldSplit:
    """Assign whole patients to ``k`` folds, stratified by risk category.

    Within each category (taken in order, patients shuffled by ``seed``) every
    patient goes to the fold currently holding the fewest patients of that
    category; ties go to the fold with the fewest patients overall, then to a
    seeded random choice.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    cats = patient_categories(manifest)
    if k > len(cats):
        raise ValueError(f"k={k} exceeds the number of patients ({len(cats)})")

    rng = np.random.default_rng(seed)
    by_cat: dict[RiskCategory, list[str]] = defaultdict(list)
    for pid in sorted(cats):
        by_cat[cats[pid]].append(pid)

    per_cat = np.zeros((len(RiskCategory), k), dtype=int)
    totals = np.zeros(k, dtype=int)
    assignment: dict[str, int] = {}
    for cat in sorted(by_cat):
        pids = by_cat[cat]
        for idx in rng.permutation(len(pids)):
            counts = per_cat[cat]
            cand = np.flatnonzero(counts == counts.min())
            cand = cand[totals[cand] == totals[cand].min()]
            fold = int(cand[rng.integers(len(cand))]) if len(cand) > 1 else int(cand[0])
            assignment[pids[idx]] = fold
            per_cat[cat, fold] += 1
            totals[fold] += 1
    return FoldSplit(k, assignment)


def fold_roles(k: int, test_fold: int) -> tuple[int, list[int]]:
    """Validation fold and training folds used when ``test_fold`` is held out.

    With ``k == 2`` there is no spare fold, so validation reuses the training fold.
    """
    if k == 2:
        other = 1 - test_fold
        return other, [other]
    val = (test_fold + 1) % k
    return val, [f for f in range(k) if f not in (test_fold, val)]
