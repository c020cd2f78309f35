"""Classification metrics: per-class precision/recall/F1, macro and weighted
aggregates, confusion matrices, and the tabular report layouts."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from canlm.errors import TaskError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K]; rows = true class, columns = predicted

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        k = self.n_classes
        buf.write("true\\pred," + ",".join(str(j) for j in range(k)) + "\n")
        for i in range(k):
            buf.write(str(i) + "," + ",".join(str(int(c)) for c in self.counts[i]) + "\n")
        return buf.getvalue()


@dataclass
class MetricReport:
    precision: np.ndarray  # per class
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    zero_division_flags: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.support)

    def positive_f1(self) -> float:
        """Binary convention: class 1 is the positive class."""
        if self.n_classes != 2:
            raise TaskError("positive_f1 applies to binary reports")
        return float(self.f1[1])

    def to_dict(self) -> dict:
        return {
            "precision": [float(x) for x in self.precision],
            "recall": [float(x) for x in self.recall],
            "f1": [float(x) for x in self.f1],
            "support": [int(x) for x in self.support],
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
            "weighted": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1": self.weighted_f1,
            },
            "zero_division_flags": list(self.zero_division_flags),
        }


def compute_metrics(truth, pred, n_classes: int) -> tuple[MetricReport, ConfusionMatrix]:
    """One-vs-rest precision/recall/F1 from the confusion matrix.

    Zero-denominator cells yield metric 0 with a flag recorded (never NaN).
    Weighted aggregates use the evaluation-set support.
    """
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise TaskError("truth and prediction must be equal-length 1-D label arrays")
    if t.size == 0:
        raise TaskError("cannot compute metrics over an empty evaluation set")
    if n_classes < 2:
        raise TaskError("need at least 2 classes")
    if t.min() < 0 or p.min() < 0 or t.max() >= n_classes or p.max() >= n_classes:
        raise TaskError(f"labels must lie in [0, {n_classes})")

    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)

    tp = np.diag(counts).astype(np.float64)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)

    flags: list[str] = []
    precision = np.zeros(n_classes)
    recall = np.zeros(n_classes)
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        if predicted[c] > 0:
            precision[c] = tp[c] / predicted[c]
        else:
            flags.append(f"class {c}: no predictions (precision=0)")
        if support[c] > 0:
            recall[c] = tp[c] / support[c]
        else:
            flags.append(f"class {c}: no support (recall=0)")
        if precision[c] + recall[c] > 0:
            f1[c] = 2 * precision[c] * recall[c] / (precision[c] + recall[c])
        else:
            flags.append(f"class {c}: F1=0")

    total = support.sum()
    report = MetricReport(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float((support * precision).sum() / total),
        weighted_recall=float((support * recall).sum() / total),
        weighted_f1=float((support * f1).sum() / total),
        zero_division_flags=flags,
    )
    return report, ConfusionMatrix(counts=counts)


def binary_table(rows: list[tuple[str, str, MetricReport]]) -> str:
    """Rows of (model, ratio, report) -> delimited table of positive-class metrics."""
    out = ["ratio,model,precision,recall,f1"]
    for model, ratio, rep in rows:
        out.append(
            f"{ratio},{model},{rep.precision[1] * 100:.1f}%,{rep.recall[1] * 100:.1f}%,{rep.f1[1] * 100:.1f}%"
        )
    return "\n".join(out) + "\n"


def multiclass_table(rows: list[tuple[str, MetricReport]]) -> str:
    """Rows of (model, report) -> macro/weighted precision, recall, F1 table."""
    out = ["model,precision_macro,precision_weighted,recall_macro,recall_weighted,f1_macro,f1_weighted"]
    for model, rep in rows:
        out.append(
            f"{model},{rep.macro_precision * 100:.1f}%,{rep.weighted_precision * 100:.1f}%,"
            f"{rep.macro_recall * 100:.1f}%,{rep.weighted_recall * 100:.1f}%,"
            f"{rep.macro_f1 * 100:.1f}%,{rep.weighted_f1 * 100:.1f}%"
        )
    return "\n".join(out) + "\n"
