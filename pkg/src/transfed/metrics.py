"""Confusion matrices and one-vs-rest classification metrics.

Per class c the one-vs-rest reduction of an n x n confusion matrix (rows =
true, columns = predicted) gives

    TP = cm[c][c]            FP = column c sum - TP
    FN = row c sum - TP      TN = total - TP - FP - FN

from which precision TP/(TP+FP), recall TP/(TP+FN), F1 as their harmonic
mean and per-class accuracy (TP+TN)/total follow. Any 0/0 is reported as 0
and flagged.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (n, n) int64, rows = true class, cols = predicted

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, labels, n_classes: int) -> ConfusionMatrix:
    """Count (true, predicted) pairs into an n x n matrix."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(
            f"preds and labels lengths differ: {preds.shape} vs {labels.shape}"
        )
    if preds.size and not (
        0 <= preds.min() and preds.max() < n_classes
        and 0 <= labels.min() and labels.max() < n_classes
    ):
        raise ValueError(f"class id out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    ovr_accuracy: np.ndarray
    overall_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    zero_division: np.ndarray  # per class, True where a 0/0 convention fired


def per_class(cm: ConfusionMatrix) -> ClassMetrics:
    """Precision/recall/F1/accuracy per class plus overall and macro values."""
    counts = cm.counts
    total = cm.total
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    tn = total - tp - fp - fn

    flagged = np.zeros(cm.n_classes, dtype=bool)

    def safe_div(num, den):
        nonlocal flagged
        zero = den == 0
        flagged |= zero
        out = np.zeros_like(num, dtype=np.float64)
        np.divide(num, den, out=out, where=~zero)
        return out

    precision = safe_div(tp, tp + fp)
    recall = safe_div(tp, tp + fn)
    f1 = safe_div(2.0 * precision * recall, precision + recall)
    ovr_acc = (tp + tn) / total if total else np.zeros(cm.n_classes)
    overall = float(tp.sum() / total) if total else 0.0
    return ClassMetrics(
        precision=precision,
        recall=recall,
        f1=f1,
        ovr_accuracy=ovr_acc,
        overall_accuracy=overall,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        zero_division=flagged,
    )


def macro_ovr_accuracy(cm: ConfusionMatrix) -> float:
    """Mean of the per-class one-vs-rest accuracies."""
    return float(per_class(cm).ovr_accuracy.mean())


def render_report(cm: ConfusionMatrix, metrics: ClassMetrics,
                  format: str = "text",
                  class_names: list[str] | None = None) -> bytes:
    """Render per-class metrics as an aligned text table or CSV.

    Text rows are Activity, Precision, Recall, F1-score plus a macro row and
    the overall accuracy; classes where a 0/0 convention applied are marked
    with ``*``. CSV uses the ``class,precision,recall,f1`` schema.
    """
    n = cm.n_classes
    names = list(class_names) if class_names else [f"class {c}" for c in range(n)]
    if len(names) != n:
        raise ValueError(f"need {n} class names, got {len(names)}")

    if format == "csv":
        buf = io.StringIO()
        buf.write("class,precision,recall,f1\r\n")
        for c in range(n):
            buf.write(f"{c},{float(metrics.precision[c])!r},"
                      f"{float(metrics.recall[c])!r},"
                      f"{float(metrics.f1[c])!r}\r\n")
        return buf.getvalue().encode("utf-8")
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")

    width = max(len("Activity"), max(len(s) for s in names), len("macro average"))
    lines = [f"{'Activity':<{width}}  Precision  Recall  F1-score"]
    for c in range(n):
        mark = "*" if metrics.zero_division[c] else " "
        lines.append(
            f"{names[c]:<{width}}  {metrics.precision[c]:>8.4f}{mark} "
            f"{metrics.recall[c]:>6.4f}  {metrics.f1[c]:>8.4f}"
        )
    lines.append(
        f"{'macro average':<{width}}  {metrics.macro_precision:>8.4f}  "
        f"{metrics.macro_recall:>6.4f}  {metrics.macro_f1:>8.4f}"
    )
    lines.append(f"overall accuracy: {metrics.overall_accuracy:.4f}")
    if metrics.zero_division.any():
        lines.append("* zero denominator reported as 0")
    return ("\n".join(lines) + "\n").encode("utf-8")


def confusion_csv(cm: ConfusionMatrix) -> bytes:
    r"""Confusion counts as CSV with a ``true\pred`` corner header."""
    buf = io.StringIO()
    header = ["true\\pred"] + [str(c) for c in range(cm.n_classes)]
    buf.write(",".join(header) + "\r\n")
    for r in range(cm.n_classes):
        buf.write(",".join([str(r)] + [str(int(v)) for v in cm.counts[r]]) + "\r\n")
    return buf.getvalue().encode("utf-8")
