"""Multi-class evaluation: confusion matrix, P/R/F1, accuracy, weighted kappa.

Conventions: classes are the ordinals 1..k; a zero denominator yields a 0.0
rate plus an "undefined" flag rather than NaN; per-class accuracy is the
class recall expressed as a percentage; macro averages are plain unweighted
means of the per-class values.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """k x k counts; rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {arr.shape}")
        if (arr < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        object.__setattr__(self, "counts", arr)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true: Sequence[int], y_pred: Sequence[int], k: int) -> ConfusionMatrix:
    """Count (true, predicted) pairs into a k x k matrix; labels are 1..k."""
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    if len(y_true) == 0:
        raise ValueError("empty label vectors")
    counts = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        if not (1 <= t <= k) or not (1 <= p <= k):
            raise ValueError(f"label out of range 1..{k}: (true={t}, pred={p})")
        counts[t - 1, p - 1] += 1
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class ClassMetrics:
    label: int
    precision: float
    recall: float
    f1: float
    accuracy_pct: float
    support: int
    undefined: tuple[str, ...] = ()


@dataclass(frozen=True)
class EvaluationReport:
    per_class: tuple[ClassMetrics, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    overall_accuracy_pct: float
    kappa_quadratic: float
    total_support: int


def macro_average(values: Sequence[float]) -> float:
    """Unweighted mean of per-class values."""
    if not values:
        raise ValueError("no values to average")
    return float(sum(values)) / len(values)


def weighted_average(values: Sequence[float], supports: Sequence[int]) -> float:
    """Support-weighted mean of per-class values."""
    if len(values) != len(supports):
        raise ValueError("values and supports differ in length")
    total = sum(supports)
    if total <= 0:
        raise ValueError("total support must be positive")
    return float(sum(v * s for v, s in zip(values, supports))) / total


def weighted_kappa(cm: ConfusionMatrix, weighting: str = "quadratic") -> float:
    """Chance-corrected agreement with distance-weighted disagreement.

    Quadratic weights penalise an (i, j) confusion by ((i-j)/(k-1))^2;
    ``weighting="linear"`` uses |i-j|/(k-1). Degenerate marginals (all mass
    in one class) give 1.0 for perfect agreement, else 0.0.
    """
    k = cm.k
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    if k < 2:
        return 1.0
    idx = np.arange(k, dtype=np.float64)
    diff = np.abs(idx[:, None] - idx[None, :]) / (k - 1)
    if weighting == "quadratic":
        w = diff**2
    elif weighting == "linear":
        w = diff
    else:
        raise ValueError(f"unknown kappa weighting {weighting!r}")
    observed = cm.counts / total
    rows = observed.sum(axis=1)
    cols = observed.sum(axis=0)
    expected = np.outer(rows, cols)
    do = float((w * observed).sum())
    de = float((w * expected).sum())
    if de == 0.0:
        return 1.0 if do == 0.0 else 0.0
    return 1.0 - do / de


def report(cm: ConfusionMatrix, kappa_weighting: str = "quadratic") -> EvaluationReport:
    """Full per-class and aggregate metrics for a confusion matrix."""
    total = cm.total
    if total == 0:
        raise ValueError("cannot compute metrics over zero samples")
    counts = cm.counts
    per_class: list[ClassMetrics] = []
    for c in range(cm.k):
        tp = int(counts[c, c])
        colsum = int(counts[:, c].sum())
        rowsum = int(counts[c, :].sum())
        undefined = []
        if colsum > 0:
            precision = tp / colsum
        else:
            precision, undefined = 0.0, undefined + ["precision"]
        if rowsum > 0:
            recall = tp / rowsum
        else:
            recall, undefined = 0.0, undefined + ["recall"]
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
        per_class.append(
            ClassMetrics(
                label=c + 1,
                precision=precision,
                recall=recall,
                f1=f1,
                accuracy_pct=100.0 * recall,
                support=rowsum,
                undefined=tuple(undefined),
            )
        )
    supports = [m.support for m in per_class]
    overall_acc = float(np.trace(counts)) / total
    return EvaluationReport(
        per_class=tuple(per_class),
        macro_precision=macro_average([m.precision for m in per_class]),
        macro_recall=macro_average([m.recall for m in per_class]),
        macro_f1=macro_average([m.f1 for m in per_class]),
        weighted_precision=weighted_average([m.precision for m in per_class], supports),
        weighted_recall=weighted_average([m.recall for m in per_class], supports),
        weighted_f1=weighted_average([m.f1 for m in per_class], supports),
        overall_accuracy_pct=100.0 * overall_acc,
        kappa_quadratic=weighted_kappa(cm, kappa_weighting),
        total_support=total,
    )


# ---------------------------------------------------------------------------
# Precision-recall points
# ---------------------------------------------------------------------------


class PRPoint(NamedTuple):
    recall: float
    precision: float
    interpolated_precision: float


def pr_points(
    y_true: Sequence[int], class_scores: Sequence[Sequence[float]]
) -> dict[int, list[PRPoint]]:
    """One-vs-rest precision/recall sweeps, one point list per class.

    For each class the observed scores are swept as thresholds from high to
    low; interpolated precision is the running maximum taken from the
    high-recall end, the usual PR-curve smoothing.
    """
    if len(y_true) != len(class_scores):
        raise ValueError("y_true and class_scores differ in length")
    if not y_true:
        raise ValueError("empty inputs")
    k = len(class_scores[0])
    for row in class_scores:
        if len(row) != k:
            raise ValueError("ragged class_scores rows")
        if any(math.isnan(v) or math.isinf(v) for v in row):
            raise ValueError("scores must be finite")

    out: dict[int, list[PRPoint]] = {}
    for c in range(1, k + 1):
        scores = [row[c - 1] for row in class_scores]
        positives = sum(1 for t in y_true if t == c)
        raw: list[tuple[float, float]] = []
        for threshold in sorted(set(scores), reverse=True):
            tp = sum(1 for s, t in zip(scores, y_true) if s >= threshold and t == c)
            fp = sum(1 for s, t in zip(scores, y_true) if s >= threshold and t != c)
            precision = tp / (tp + fp) if tp + fp > 0 else 0.0
            recall = tp / positives if positives > 0 else 0.0
            raw.append((recall, precision))
        # interpolated precision at recall r is the best precision achieved
        # at any recall >= r; equal-recall points share one value
        interp = [0.0] * len(raw)
        best = 0.0
        i = len(raw) - 1
        while i >= 0:
            j = i
            while j >= 0 and raw[j][0] == raw[i][0]:
                j -= 1
            best = max([best] + [raw[t][1] for t in range(j + 1, i + 1)])
            for t in range(j + 1, i + 1):
                interp[t] = best
            i = j
        out[c] = [PRPoint(r, p, interp[t]) for t, (r, p) in enumerate(raw)]
    return out


# ---------------------------------------------------------------------------
# Report import/export
# ---------------------------------------------------------------------------


def report_to_dict(rep: EvaluationReport) -> dict:
    return {
        "per_class": [
            {
                "label": m.label,
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "accuracy_pct": m.accuracy_pct,
                "support": m.support,
                "undefined": list(m.undefined),
            }
            for m in rep.per_class
        ],
        "macro": {"precision": rep.macro_precision, "recall": rep.macro_recall, "f1": rep.macro_f1},
        "weighted": {
            "precision": rep.weighted_precision,
            "recall": rep.weighted_recall,
            "f1": rep.weighted_f1,
        },
        "overall_accuracy_pct": rep.overall_accuracy_pct,
        "kappa_quadratic": rep.kappa_quadratic,
        "total_support": rep.total_support,
    }


def report_from_dict(data: dict) -> EvaluationReport:
    per_class = tuple(
        ClassMetrics(
            label=m["label"],
            precision=m["precision"],
            recall=m["recall"],
            f1=m["f1"],
            accuracy_pct=m["accuracy_pct"],
            support=m["support"],
            undefined=tuple(m.get("undefined", ())),
        )
        for m in data["per_class"]
    )
    return EvaluationReport(
        per_class=per_class,
        macro_precision=data["macro"]["precision"],
        macro_recall=data["macro"]["recall"],
        macro_f1=data["macro"]["f1"],
        weighted_precision=data["weighted"]["precision"],
        weighted_recall=data["weighted"]["recall"],
        weighted_f1=data["weighted"]["f1"],
        overall_accuracy_pct=data["overall_accuracy_pct"],
        kappa_quadratic=data["kappa_quadratic"],
        total_support=data["total_support"],
    )


def export_report(
    rep: EvaluationReport, fmt: str = "text", class_names: Sequence[str] | None = None
) -> bytes:
    """Serialise a report as a text table, JSON, or CSV.

    The text table keeps rates at 2 decimals and percents at 2 decimals,
    with Accuracy / Macro Avg. / Weighted Avg. footer rows; zero-support
    classes are marked with ``*``. JSON carries full precision.
    """
    if fmt == "json":
        return json.dumps(report_to_dict(rep), indent=2, sort_keys=True).encode("utf-8")
    if class_names is None:
        class_names = [str(m.label) for m in rep.per_class]
    if len(class_names) != len(rep.per_class):
        raise ValueError("class_names length mismatch")

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["class", "precision", "recall", "f1", "accuracy_pct", "support"])
        for name, m in zip(class_names, rep.per_class):
            writer.writerow([name, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}", f"{m.accuracy_pct:.4f}", m.support])
        writer.writerow(["accuracy", "", "", "", f"{rep.overall_accuracy_pct:.4f}", rep.total_support])
        writer.writerow(["macro_avg", f"{rep.macro_precision:.6f}", f"{rep.macro_recall:.6f}", f"{rep.macro_f1:.6f}", f"{rep.overall_accuracy_pct:.4f}", rep.total_support])
        writer.writerow(["weighted_avg", f"{rep.weighted_precision:.6f}", f"{rep.weighted_recall:.6f}", f"{rep.weighted_f1:.6f}", "", rep.total_support])
        writer.writerow(["kappa_quadratic", f"{rep.kappa_quadratic:.6f}", "", "", "", ""])
        return buf.getvalue().encode("utf-8")

    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    rows = [["Class", "Precision", "Recall", "F1-Score", "Accuracy %", "# Images"]]
    flagged = False
    for name, m in zip(class_names, rep.per_class):
        mark = "*" if m.undefined or m.support == 0 else ""
        flagged = flagged or bool(mark)
        rows.append(
            [
                f"{name}{mark}",
                f"{m.precision:.2f}",
                f"{m.recall:.2f}",
                f"{m.f1:.2f}",
                f"{m.accuracy_pct:.2f}",
                str(m.support),
            ]
        )
    rows.append(["Accuracy", "", "", "", f"{rep.overall_accuracy_pct:.2f}", str(rep.total_support)])
    rows.append(
        [
            "Macro Avg.",
            f"{rep.macro_precision:.2f}",
            f"{rep.macro_recall:.2f}",
            f"{rep.macro_f1:.2f}",
            f"{rep.overall_accuracy_pct:.2f}",
            str(rep.total_support),
        ]
    )
    rows.append(
        [
            "Weighted Avg.",
            f"{rep.weighted_precision:.2f}",
            f"{rep.weighted_recall:.2f}",
            f"{rep.weighted_f1:.2f}",
            "",
            str(rep.total_support),
        ]
    )
    widths = [max(len(r[i]) for r in rows) for i in range(6)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0 or i == len(rows) - 4:
            lines.append("-" * (sum(widths) + 10))
    lines.append(f"Quadratic-weighted kappa: {rep.kappa_quadratic:.4f}")
    if flagged:
        lines.append("* rate reported as 0.00 because its denominator is zero")
    return ("\n".join(lines) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# Prediction file input
# ---------------------------------------------------------------------------


@dataclass
class PredictionSet:
    sample_ids: list[str] = field(default_factory=list)
    y_true: list[int] = field(default_factory=list)
    y_pred: list[int] = field(default_factory=list)
    scores: list[list[float]] | None = None


def read_predictions(path) -> PredictionSet:
    """Read a ``sample_id,true_class,pred_class[,score_1..score_k]`` CSV."""
    pred = PredictionSet()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError("empty predictions file")
        if [h.strip() for h in header[:3]] != ["sample_id", "true_class", "pred_class"]:
            raise ValueError(
                "predictions header must start with sample_id,true_class,pred_class"
            )
        n_scores = max(0, len(header) - 3)
        if n_scores:
            pred.scores = []
        for row in reader:
            if not row:
                continue
            pred.sample_ids.append(row[0])
            pred.y_true.append(int(row[1]))
            pred.y_pred.append(int(row[2]))
            if n_scores:
                pred.scores.append([float(v) for v in row[3 : 3 + n_scores]])
    return pred
