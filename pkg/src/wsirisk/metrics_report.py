"""Confusion matrices, one-vs-rest metrics, ordinal correlation and reports.

Metrics are exact :class:`fractions.Fraction` values; an undefined ratio (zero
denominator) is ``None`` rather than 0. Rendering uses three decimals with
round-half-up.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, localcontext
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .labeling import RISK_CLASSES, RiskCategory, bin_rs

REPORT_SCHEMA_VERSION = 1
RISK_LABELS = tuple(c.label for c in RISK_CLASSES)
PATCH_LABELS = ("Benign",) + RISK_LABELS
GRADE_LABELS = ("Grade 1", "Grade 2", "Grade 3")


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray
    column_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.labels)
        if counts.shape != (k, k):
            raise ValueError(f"counts must be {k}x{k}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "counts", counts)
        if self.column_labels is not None:
            object.__setattr__(self, "column_labels", tuple(self.column_labels))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def columns(self) -> tuple[str, ...]:
        return self.column_labels or self.labels

    def cell(self, true: str, predicted: str) -> int:
        return int(self.counts[self.labels.index(true), self.columns.index(predicted)])

    def index(self, label: str | RiskCategory | int) -> int:
        if isinstance(label, RiskCategory):
            label = label.label
        if isinstance(label, str):
            if label not in self.labels:
                raise ValueError(f"unknown class {label!r}; expected one of {self.labels}")
            return self.labels.index(label)
        if not 0 <= int(label) < len(self.labels):
            raise ValueError(f"class index {label} out of range")
        return int(label)

    def pairs(self) -> list[tuple[str, str]]:
        """Expand back into ``(true, predicted)`` pairs in row-major cell order."""
        out = []
        for i, t in enumerate(self.labels):
            for j, p in enumerate(self.columns):
                out.extend([(t, p)] * int(self.counts[i, j]))
        return out

    def to_dict(self) -> dict:
        d = {"labels": list(self.labels), "counts": self.counts.tolist(), "total": self.total}
        if self.column_labels is not None:
            d["column_labels"] = list(self.column_labels)
        return d


def _label_of(v) -> str:
    if isinstance(v, RiskCategory):
        return v.label
    return str(v)


def build_confusion(pairs: Iterable[tuple], labels: Sequence[str] = RISK_LABELS,
                    column_labels: Sequence[str] | None = None) -> ConfusionMatrix:
    """Count ``(true, predicted)`` pairs; labels may be strings or RiskCategory."""
    labels = tuple(labels)
    cols = tuple(column_labels) if column_labels is not None else labels
    counts = np.zeros((len(labels), len(cols)), dtype=np.int64)
    for true, pred in pairs:
        t, p = _label_of(true), _label_of(pred)
        if t not in labels or p not in cols:
            raise ValueError(f"pair ({t!r}, {p!r}) outside labels {labels}")
        counts[labels.index(t), cols.index(p)] += 1
    return ConfusionMatrix(labels, counts, column_labels if column_labels is not None else None)


def _ratio(num: int, den: int) -> Fraction | None:
    return Fraction(num, den) if den else None


def overall_accuracy(m: ConfusionMatrix) -> Fraction | None:
    return _ratio(int(np.trace(m.counts)), m.total)


@dataclass(frozen=True)
class ClassMetrics:
    label: str
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def accuracy(self) -> Fraction | None:
        return _ratio(self.tp + self.tn, self.tp + self.fp + self.fn + self.tn)

    @property
    def sensitivity(self) -> Fraction | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> Fraction | None:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self) -> Fraction | None:
        return _ratio(self.tp, self.tp + self.fp)

    def values(self) -> dict[str, Fraction | None]:
        return {"accuracy": self.accuracy, "sensitivity": self.sensitivity,
                "specificity": self.specificity, "ppv": self.ppv}

    def to_dict(self) -> dict:
        out = {"label": self.label, "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}
        out.update({k: metric_entry(v) for k, v in self.values().items()})
        return out


METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "ppv")


def class_metrics(m: ConfusionMatrix, cls) -> ClassMetrics:
    """One-vs-rest counts for ``cls`` (label, RiskCategory or row index)."""
    # With distinct column labels, row i pairs with column i (Grade 1 vs Low).
    i = m.index(cls)
    c = m.counts
    tp = int(c[i, i])
    fn = int(c[i].sum()) - tp
    fp = int(c[:, i].sum()) - tp
    tn = m.total - tp - fn - fp
    return ClassMetrics(m.labels[i], tp, fp, fn, tn)


def all_class_metrics(m: ConfusionMatrix) -> list[ClassMetrics]:
    return [class_metrics(m, i) for i in range(len(m.labels))]


def pearson_from_contingency(m: ConfusionMatrix, row_scores: Sequence[float],
                             col_scores: Sequence[float]) -> float | None:
    """Count-weighted Pearson correlation between row and column scores.

    Moments are accumulated exactly; ``None`` when either margin has zero
    variance (or the table is empty).
    """
    c = m.counts
    if len(row_scores) != c.shape[0] or len(col_scores) != c.shape[1]:
        raise ValueError("score vectors must match the table shape")
    rs = [Fraction(v) for v in row_scores]
    cs = [Fraction(v) for v in col_scores]
    n = m.total
    if n == 0:
        return None
    cells = [(int(c[i, j]), rs[i], cs[j]) for i in range(c.shape[0]) for j in range(c.shape[1]) if c[i, j]]
    mx = sum(w * x for w, x, _ in cells) / n
    my = sum(w * y for w, _, y in cells) / n
    cov = sum(w * (x - mx) * (y - my) for w, x, y in cells)
    vx = sum(w * (x - mx) ** 2 for w, x, _ in cells)
    vy = sum(w * (y - my) ** 2 for w, _, y in cells)
    if vx == 0 or vy == 0:
        return None
    # exact r^2, one rounding to float, one in the square root
    r = math.sqrt(float(cov * cov / (vx * vy)))
    return math.copysign(min(r, 1.0), cov)


def round3(value: Fraction | float | None) -> str | None:
    """Three-decimal rendering, ties rounded away from zero."""
    if value is None:
        return None
    frac = Fraction(value)
    with localcontext() as ctx:
        ctx.prec = 60
        dec = Decimal(frac.numerator) / Decimal(frac.denominator)
        return str(dec.quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def metric_entry(value: Fraction | None) -> dict | None:
    if value is None:
        return None
    return {"value": round3(value), "exact": f"{value.numerator}/{value.denominator}"}


# ---------------------------------------------------------------------------
# published fixtures (rows = true, columns = predicted)

TABLE1 = ConfusionMatrix(PATCH_LABELS, [
    [30090, 227, 1033, 180],
    [137, 725, 259, 0],
    [1585, 1583, 15268, 1853],
    [9, 0, 192, 4474],
])
TABLE1_ACCURACY = 0.8775

TABLE2 = ConfusionMatrix(RISK_LABELS, [
    [42, 5, 2],
    [14, 44, 1],
    [0, 8, 9],
])

# Printed slide-level metrics per class.
TABLE3 = {
    "Low": {"accuracy": 0.932, "sensitivity": 0.857, "specificity": 0.816, "ppv": 0.851},
    "Intermediate": {"accuracy": 0.776, "sensitivity": 0.746, "specificity": 0.803, "ppv": 0.772},
    "High": {"accuracy": 0.912, "sensitivity": 0.529, "specificity": 0.972, "ppv": 0.750},
}

TABLE4 = ConfusionMatrix(GRADE_LABELS, [
    [17077, 3909, 733],
    [4802, 34114, 10779],
    [27, 4500, 10621],
], column_labels=RISK_LABELS)

# Sensitivity / specificity quoted alongside the grade table.
TABLE4_CAPTION = {
    "Grade 1": {"sensitivity": 0.78, "specificity": 0.92},
    "Grade 2": {"sensitivity": 0.68, "specificity": 0.77},
    "Grade 3": {"sensitivity": 0.70, "specificity": 0.83},
}
PUBLISHED_CORRELATION = 0.61
PUBLISHED_CORRELATION_NO_GRADE2 = 0.79


@dataclass
class Check:
    name: str
    expected: float | None
    computed: Fraction | float | None
    tolerance: float | None
    status: str  # "pass", "fail", "flag", "info"
    note: str = ""

    def to_dict(self) -> dict:
        comp = self.computed
        return {
            "name": self.name,
            "expected": self.expected,
            "computed": None if comp is None else float(comp),
            "computed_rounded": round3(comp) if comp is not None else None,
            "tolerance": self.tolerance,
            "status": self.status,
            "note": self.note,
        }


@dataclass
class Verification:
    checks: list[Check] = field(default_factory=list)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if c.status == "fail"]

    @property
    def flags(self) -> list[Check]:
        return [c for c in self.checks if c.status == "flag"]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"ok": self.ok, "n_checks": len(self.checks), "n_failures": len(self.failures),
                "n_flags": len(self.flags), "checks": [c.to_dict() for c in self.checks]}


def _within(computed, expected: float, tol: float) -> bool:
    return computed is not None and abs(float(computed) - expected) <= tol + 1e-12


def drop_class(m: ConfusionMatrix, index: int) -> ConfusionMatrix:
    keep = [i for i in range(len(m.labels)) if i != index]
    cols = None if m.column_labels is None else [m.column_labels[i] for i in keep]
    return ConfusionMatrix([m.labels[i] for i in keep], m.counts[np.ix_(keep, keep)], cols)


def verify_paper_tables() -> Verification:
    """Recompute the published metrics from the embedded count tables.

    Table-3 cells that disagree with what Table 2 implies are recorded as
    ``flag`` entries (the Table-2-derived value is what gets asserted).
    """
    v = Verification()
    acc1 = overall_accuracy(TABLE1)
    v.checks.append(Check("table1.overall_accuracy", TABLE1_ACCURACY, acc1, 1e-4,
                          "pass" if _within(acc1, TABLE1_ACCURACY, 1e-4) else "fail"))
    v.checks.append(Check("table2.total", 125, Fraction(TABLE2.total), 0,
                          "pass" if TABLE2.total == 125 else "fail"))
    for cm in all_class_metrics(TABLE2):
        vals = cm.values()
        for name in METRIC_NAMES:
            printed = TABLE3[cm.label][name]
            computed = vals[name]
            tag = f"table3.{cm.label}.{name}"
            if _within(computed, printed, 1e-3):
                v.checks.append(Check(tag, printed, computed, 1e-3, "pass"))
            else:
                v.checks.append(Check(
                    tag, printed, computed, 1e-3, "flag",
                    f"printed {printed:.3f} disagrees with {round3(computed)} "
                    f"({computed.numerator}/{computed.denominator}) derived from the count table",
                ))
    for cm in all_class_metrics(TABLE4):
        for name in ("sensitivity", "specificity"):
            quoted = TABLE4_CAPTION[cm.label][name]
            computed = cm.values()[name]
            v.checks.append(Check(f"table4.{cm.label}.{name}", quoted, computed, 1e-2,
                                  "pass" if _within(computed, quoted, 1e-2) else "fail"))
    r = pearson_from_contingency(TABLE4, (1, 2, 3), (1, 2, 3))
    v.checks.append(Check("table4.pearson", PUBLISHED_CORRELATION, r, None, "info",
                          "weighted Pearson over all cells; published method unspecified"))
    r13 = pearson_from_contingency(drop_class(TABLE4, 1), (1, 3), (1, 3))
    v.checks.append(Check("table4.pearson_without_grade2", PUBLISHED_CORRELATION_NO_GRADE2, r13, None, "info",
                          "grade 2 row and intermediate column removed"))
    return v


# ---------------------------------------------------------------------------
# report emission


@dataclass
class SlideRecord:
    slide_id: str
    patient_id: str
    rs_score: float
    grade: int | None
    predicted: RiskCategory | None
    status: str
    cancer_area_fraction: float | None = None
    accepted: int = 0
    rejected: int = 0
    fold: int | None = None

    @property
    def true_category(self) -> RiskCategory:
        return bin_rs(self.rs_score)


def cancer_area_fraction(mask: np.ndarray) -> float:
    """Share of all slide pixels marked cancer."""
    mask = np.asarray(mask)
    return float(np.count_nonzero(mask)) / mask.size if mask.size else 0.0


def _write_matrix_csv(path: Path, m: ConfusionMatrix) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\predicted", *m.columns])
        for label, row in zip(m.labels, m.counts.tolist()):
            w.writerow([label, *row])


def metrics_block(m: ConfusionMatrix) -> dict:
    return {
        "confusion": m.to_dict(),
        "overall_accuracy": metric_entry(overall_accuracy(m)),
        "classes": [cm.to_dict() for cm in all_class_metrics(m)],
    }


def emit_report(records: Sequence[SlideRecord], out_dir: str | Path,
                patch_pairs: Iterable[tuple[str, str]] | None = None,
                heatmaps: dict[str, str] | None = None,
                verification: Verification | None = None) -> dict:
    """Write ``report.json`` plus CSV exports; return the report document.

    Slide accuracy counts slides without a vote as incorrect. The confusion
    matrix holds voted slides only; unvoted slides are tallied per true class.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.slide_id)
    voted = [r for r in records if r.predicted is not None]
    wsi = build_confusion([(r.true_category, r.predicted) for r in voted])
    unvoted = {label: 0 for label in RISK_LABELS}
    for r in records:
        if r.predicted is None:
            unvoted[r.true_category.label] += 1
    correct = sum(r.predicted == r.true_category for r in voted)
    report: dict = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "n_slides": len(records),
        "n_voted": len(voted),
        "slide_accuracy": metric_entry(_ratio(correct, len(records))),
        "wsi": metrics_block(wsi),
        "unvoted_by_true_class": unvoted,
        "high_true_predicted_low": wsi.cell("High", "Low"),
    }
    graded = [r for r in voted if r.grade is not None]
    if graded:
        grade = build_confusion([(GRADE_LABELS[r.grade - 1], r.predicted.label) for r in graded],
                                GRADE_LABELS, RISK_LABELS)
        report["grade"] = metrics_block(grade)
        report["grade"]["pearson"] = pearson_from_contingency(grade, (1, 2, 3), (1, 2, 3))
        _write_matrix_csv(out / "grade_confusion.csv", grade)
    else:
        report["grade"] = None
    if patch_pairs is not None:
        patch = build_confusion(patch_pairs, PATCH_LABELS)
        report["patch"] = metrics_block(patch)
        _write_matrix_csv(out / "patch_confusion.csv", patch)
    else:
        report["patch"] = None
    report["scatter"] = [
        {"slide_id": r.slide_id, "cancer_area_fraction": r.cancer_area_fraction, "rs_score": r.rs_score,
         "true": r.true_category.label, "predicted": None if r.predicted is None else r.predicted.label,
         "correct": r.predicted == r.true_category}
        for r in records
    ]
    report["slides"] = [
        {"slide_id": r.slide_id, "patient_id": r.patient_id, "fold": r.fold, "status": r.status,
         "accepted": r.accepted, "rejected": r.rejected}
        for r in records
    ]
    report["heatmaps"] = dict(sorted((heatmaps or {}).items()))
    report["paper_tables"] = None if verification is None else verification.to_dict()

    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_matrix_csv(out / "wsi_confusion.csv", wsi)
    with (out / "class_metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", *METRIC_NAMES])
        for cm in all_class_metrics(wsi):
            vals = cm.values()
            w.writerow([cm.label, *(round3(vals[n]) or "" for n in METRIC_NAMES)])
    with (out / "scatter.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "cancer_area_fraction", "rs_score", "true", "predicted"])
        for row in report["scatter"]:
            caf = row["cancer_area_fraction"]
            w.writerow([row["slide_id"], "" if caf is None else f"{caf:.6f}", row["rs_score"],
                        row["true"], row["predicted"] or ""])
    return report
