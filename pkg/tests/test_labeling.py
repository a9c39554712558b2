from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsirisk.labeling import (
    FoldSplit, RiskCategory, bin_rs, cancer_fraction, fold_roles, label_patch, make_folds, patient_categories,
)
from wsirisk.slide_core import SlideManifestEntry


@pytest.mark.parametrize("rs, cat", [(0, "Low"), (17, "Low"), (18, "Intermediate"), (31, "Intermediate"),
                                     (32, "High"), (100, "High")])
def test_bin_rs_boundaries(rs, cat):
    assert bin_rs(rs).label == cat


@pytest.mark.parametrize("bad", [-1, 101, 17.5, True])
def test_bin_rs_rejects_invalid(bad):
    with pytest.raises(ValueError):
        bin_rs(bad)


def test_label_patch_rules():
    assert label_patch(0.0, 50) == RiskCategory.BENIGN
    assert label_patch(0.24, 50) == RiskCategory.BENIGN
    assert label_patch(0.25, 50) == RiskCategory.HIGH
    assert label_patch(0.25, 10) == RiskCategory.LOW
    assert label_patch(1.0, 20) == RiskCategory.INTERMEDIATE


@given(st.floats(0.0, 1.0), st.integers(0, 100))
def test_label_patch_property(fraction, rs):
    lab = label_patch(fraction, rs)
    if fraction < 0.25:
        assert lab == RiskCategory.BENIGN
    else:
        assert lab == bin_rs(rs) and lab != RiskCategory.BENIGN


def test_cancer_fraction_counts_nonzero():
    m = np.zeros((4, 4), dtype=np.uint8)
    m[0] = 255
    assert cancer_fraction(m) == 0.25


def _manifest(n_low=10, n_int=6, n_high=4, slides=1):
    out = []
    rs_for = {"L": 5, "I": 25, "H": 60}
    idx = 0
    for code, n in (("L", n_low), ("I", n_int), ("H", n_high)):
        for _ in range(n):
            for s in range(slides):
                out.append(SlideManifestEntry(f"P{idx:03d}_S{s}", f"P{idx:03d}", rs_for[code], None, "", ""))
            idx += 1
    return out


def test_folds_patient_level_and_stratified():
    manifest = _manifest(slides=2)
    folds = make_folds(manifest, k=5, seed=3)
    cats = patient_categories(manifest)
    for cat in (RiskCategory.LOW, RiskCategory.INTERMEDIATE, RiskCategory.HIGH):
        per_fold = [sum(1 for p, f in folds.assignment.items() if f == k and cats[p] == cat) for k in range(5)]
        assert max(per_fold) - min(per_fold) <= 1
    # each patient in exactly one fold
    assert sorted(folds.assignment) == sorted(cats)
    for k in range(5):
        for j in range(k + 1, 5):
            assert not set(folds.patients(k)) & set(folds.patients(j))


def test_folds_deterministic_and_seed_sensitive():
    m = _manifest()
    assert make_folds(m, 5, 0) == make_folds(m, 5, 0)
    assert any(make_folds(m, 5, 0).assignment != make_folds(m, 5, s).assignment for s in range(1, 5))


def test_fold_json_roundtrip(tmp_path):
    folds = make_folds(_manifest(), 4, 1)
    folds.save(tmp_path / "f.json")
    assert FoldSplit.load(tmp_path / "f.json") == folds


def test_fold_errors():
    with pytest.raises(ValueError):
        make_folds(_manifest(), k=1)
    with pytest.raises(ValueError):
        make_folds(_manifest(1, 0, 0), k=2)


def test_fold_roles():
    assert fold_roles(5, 0) == (1, [2, 3, 4])
    assert fold_roles(5, 4) == (0, [1, 2, 3])
    assert fold_roles(2, 0) == (1, [1])
