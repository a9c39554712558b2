from __future__ import annotations

import json
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsirisk.labeling import RiskCategory
from wsirisk.metrics_report import (
    TABLE1, TABLE2, TABLE3, TABLE4, ConfusionMatrix, SlideRecord, build_confusion, class_metrics, emit_report,
    overall_accuracy, pearson_from_contingency, round3, verify_paper_tables,
)


def weighted_pearson_oracle(counts, rs, cs, dps=50):
    """Direct summation at high precision."""
    mpmath.mp.dps = dps
    counts = [[mpmath.mpf(int(v)) for v in row] for row in counts]
    rs = [mpmath.mpf(v) for v in rs]
    cs = [mpmath.mpf(v) for v in cs]
    n = sum(sum(row) for row in counts)
    cells = [(counts[i][j], rs[i], cs[j]) for i in range(len(rs)) for j in range(len(cs))]
    mx = sum(w * x for w, x, _ in cells) / n
    my = sum(w * y for w, _, y in cells) / n
    cov = sum(w * (x - mx) * (y - my) for w, x, y in cells)
    vx = sum(w * (x - mx) ** 2 for w, x, _ in cells)
    vy = sum(w * (y - my) ** 2 for w, _, y in cells)
    return cov / mpmath.sqrt(vx * vy)


def test_build_confusion_basics():
    m = build_confusion([(RiskCategory.LOW, RiskCategory.LOW), ("High", "High")])
    assert m.counts.tolist() == [[1, 0, 0], [0, 0, 0], [0, 0, 1]]
    assert build_confusion([]).total == 0
    with pytest.raises(ValueError):
        build_confusion([("Low", "Benign")])


def test_table2_roundtrip_through_pairs():
    assert TABLE2.total == 125
    back = build_confusion(TABLE2.pairs())
    assert np.array_equal(back.counts, TABLE2.counts)


def test_overall_accuracy():
    assert overall_accuracy(TABLE1) == Fraction(50557, 57615)
    assert overall_accuracy(ConfusionMatrix(("a", "b"), np.eye(2, dtype=int))) == 1
    assert overall_accuracy(ConfusionMatrix(("a", "b"), [[0, 3], [2, 0]])) == 0
    assert overall_accuracy(ConfusionMatrix(("a", "b"), np.zeros((2, 2)))) is None


def test_class_metrics_from_table2():
    high = class_metrics(TABLE2, "High")
    assert (high.sensitivity, high.specificity, high.ppv, high.accuracy) == (
        Fraction(9, 17), Fraction(105, 108), Fraction(9, 12), Fraction(114, 125))
    inter = class_metrics(TABLE2, RiskCategory.INTERMEDIATE)
    assert (inter.sensitivity, inter.specificity, inter.ppv, inter.accuracy) == (
        Fraction(44, 59), Fraction(53, 66), Fraction(44, 57), Fraction(97, 125))
    low = class_metrics(TABLE2, 0)
    assert low.accuracy == Fraction(104, 125) and low.ppv == Fraction(42, 56)


def test_class_metrics_undefined_is_none():
    m = ConfusionMatrix(("a", "b"), [[5, 0], [0, 0]])
    a = class_metrics(m, "a")
    assert a.sensitivity == 1 and a.ppv == 1 and a.accuracy == 1
    assert a.specificity is None
    assert class_metrics(m, "b").sensitivity is None


@settings(max_examples=100)
@given(st.lists(st.integers(0, 30), min_size=9, max_size=9))
def test_metrics_are_exact_rationals_in_unit_interval(cells):
    m = ConfusionMatrix(("L", "I", "H"), np.array(cells).reshape(3, 3))
    for i in range(3):
        cm = class_metrics(m, i)
        for v in cm.values().values():
            assert v is None or (isinstance(v, Fraction) and 0 <= v <= 1)
        if cm.sensitivity is not None:
            assert cm.sensitivity * (cm.tp + cm.fn) == cm.tp


def test_pearson_trivial_tables():
    diag = ConfusionMatrix(("a", "b", "c"), np.diag([3, 4, 5]))
    assert pearson_from_contingency(diag, (1, 2, 3), (1, 2, 3)) == pytest.approx(1.0, abs=1e-15)
    anti = ConfusionMatrix(("a", "b", "c"), np.fliplr(np.diag([3, 4, 5])))
    assert pearson_from_contingency(anti, (1, 2, 3), (1, 2, 3)) == pytest.approx(-1.0, abs=1e-15)
    const = ConfusionMatrix(("a", "b"), [[3, 4], [0, 0]])
    assert pearson_from_contingency(const, (1, 2), (1, 2)) is None


def test_pearson_table4_matches_oracle():
    got = pearson_from_contingency(TABLE4, (1, 2, 3), (1, 2, 3))
    assert abs(got - float(weighted_pearson_oracle(TABLE4.counts.tolist(), (1, 2, 3), (1, 2, 3)))) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=9, max_size=9).filter(lambda c: sum(c) > 0),
       st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariant_and_bounded(cells, a, b, c, d):
    m = ConfusionMatrix(("x", "y", "z"), np.array(cells).reshape(3, 3))
    r = pearson_from_contingency(m, (1, 2, 3), (1, 2, 3))
    r2 = pearson_from_contingency(m, [a * s + b for s in (1, 2, 3)], [c * s + d for s in (1, 2, 3)])
    if r is None:
        return
    assert -1 <= r <= 1
    assert r2 == pytest.approx(r, abs=1e-9)
    oracle = weighted_pearson_oracle(m.counts.tolist(), (1, 2, 3), (1, 2, 3), dps=30)
    assert abs(r - float(oracle)) < 1e-12


def test_round3_half_up():
    assert round3(Fraction(1, 8)) == "0.125"
    assert round3(Fraction(1125, 10000)) == "0.113"
    assert round3(Fraction(9, 17)) == "0.529"
    assert round3(None) is None


def test_table_verifier_flags_low_column():
    v = verify_paper_tables()
    assert v.ok
    assert sorted(c.name for c in v.flags) == ["table3.Low.accuracy", "table3.Low.ppv"]
    flagged = {c.name: c.computed for c in v.flags}
    assert flagged["table3.Low.accuracy"] == Fraction(104, 125)
    assert flagged["table3.Low.ppv"] == Fraction(42, 56)
    assert TABLE3["Low"]["accuracy"] == 0.932


def _records():
    return [
        SlideRecord("a", "p1", 5, 1, RiskCategory.LOW, "ok", 0.3, 4, 1, 0),
        SlideRecord("b", "p2", 40, 3, RiskCategory.LOW, "ok", 0.5, 2, 0, 1),
        SlideRecord("c", "p3", 25, None, None, "no-cancer-patches", 0.2, 0, 3, 1),
    ]


def test_emit_report_contents_and_determinism(tmp_path):
    rep = emit_report(_records(), tmp_path / "a", patch_pairs=[("Benign", "Benign"), ("Low", "High")])
    emit_report(_records()[::-1], tmp_path / "b", patch_pairs=[("Benign", "Benign"), ("Low", "High")])
    for name in ("report.json", "wsi_confusion.csv", "class_metrics.csv", "scatter.csv", "patch_confusion.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert rep["high_true_predicted_low"] == 1
    assert rep["slide_accuracy"]["exact"] == "1/3"
    assert rep["unvoted_by_true_class"]["Intermediate"] == 1
    assert rep["grade"]["confusion"]["total"] == 2
    assert len(rep["scatter"]) == 3


def test_emit_report_empty(tmp_path):
    rep = emit_report([], tmp_path)
    assert rep["n_slides"] == 0 and rep["slide_accuracy"] is None
    assert json.loads((tmp_path / "report.json").read_text())["wsi"]["confusion"]["total"] == 0


def test_table2_injected_reproduces_metrics_block(tmp_path):
    rs = {"Low": 5, "Intermediate": 25, "High": 50}
    recs = [SlideRecord(f"s{i}", f"p{i}", rs[t], None, RiskCategory[p.upper()], "ok")
            for i, (t, p) in enumerate(TABLE2.pairs())]
    rep = emit_report(recs, tmp_path)
    by_label = {c["label"]: c for c in rep["wsi"]["classes"]}
    assert by_label["High"]["sensitivity"]["value"] == "0.529"
    assert by_label["Intermediate"]["accuracy"]["value"] == "0.776"
    assert by_label["Low"]["accuracy"]["value"] == "0.832"
