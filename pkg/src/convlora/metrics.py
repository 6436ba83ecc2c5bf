"""Confusion matrices and multiclass classification metrics.

Per-class precision/recall/F1 come from one-vs-rest reductions of the
confusion matrix with the 0/0 -> 0 convention. Averaging modes: micro
(pool counts), macro (unweighted class mean), weighted (class-support
weighted mean; the default, under which recall equals accuracy). The
correlation coefficient uses the multiclass generalization and reduces to
the familiar binary formula at K = 2.

Per-class ratios and their averages are computed in exact rational
arithmetic and converted to float once, at the boundary. Consequently the
structural identities (micro precision = recall = F1 = accuracy, weighted
recall = accuracy) hold to the last bit, and every reported value is
exactly reproducible from a dumped (prediction, label) list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

AVERAGING_MODES = ("micro", "macro", "weighted")


def confusion(preds, labels, num_classes: int) -> np.ndarray:
    """K x K integer counts; rows are true classes, columns predictions."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be 1-D and the same length")
    if preds.size:
        lo = min(preds.min(), labels.min())
        hi = max(preds.max(), labels.max())
        if lo < 0 or hi >= num_classes:
            raise ValueError(f"class index out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _fdiv(a, b) -> Fraction:
    # exact rational division with the 0/0 -> 0 convention
    return Fraction(a) / Fraction(b) if b else Fraction(0)


def _class_counts(cm: np.ndarray):
    # python-native numbers: integer matrices stay exact at any magnitude
    rows = np.asarray(cm).tolist()
    k = len(rows)
    tp = [rows[i][i] for i in range(k)]
    fp = [sum(rows[r][i] for r in range(k)) - tp[i] for i in range(k)]
    fn = [sum(rows[i]) - tp[i] for i in range(k)]
    support = [tp[i] + fn[i] for i in range(k)]
    return tp, fp, fn, support


def _per_class_fracs(cm: np.ndarray):
    tp, fp, fn, support = _class_counts(cm)
    p = [_fdiv(tp[i], tp[i] + fp[i]) for i in range(len(tp))]
    r = [_fdiv(tp[i], tp[i] + fn[i]) for i in range(len(tp))]
    f1 = [_fdiv(2 * p[i] * r[i], p[i] + r[i]) for i in range(len(tp))]
    return p, r, f1, support


def per_class_prf1(cm: np.ndarray) -> list[dict]:
    """One-vs-rest precision/recall/F1 and support for every class."""
    p, r, f1, support = _per_class_fracs(cm)
    return [{"class_id": i, "support": support[i], "precision": float(p[i]),
             "recall": float(r[i]), "f1": float(f1[i])}
            for i in range(len(support))]


def prf1(cm: np.ndarray, averaging: str = "weighted") -> tuple[float, float, float]:
    if averaging not in AVERAGING_MODES:
        raise ValueError(f"averaging must be one of {AVERAGING_MODES}")
    if averaging == "micro":
        tp, fp, fn, _ = _class_counts(cm)
        tps, fps, fns = sum(tp), sum(fp), sum(fn)
        p = _fdiv(tps, tps + fps)
        r = _fdiv(tps, tps + fns)
        return float(p), float(r), float(_fdiv(2 * p * r, p + r))
    p, r, f1, support = _per_class_fracs(cm)
    if averaging == "macro":
        k = len(support)
        return float(sum(p) / k), float(sum(r) / k), float(sum(f1) / k)
    total = sum(support)
    if total == 0:
        return 0.0, 0.0, 0.0
    return (float(sum(s * v for s, v in zip(support, p)) / total),
            float(sum(s * v for s, v in zip(support, r)) / total),
            float(sum(s * v for s, v in zip(support, f1)) / total))


def accuracy(cm: np.ndarray) -> float:
    rows = np.asarray(cm).tolist()
    total = sum(sum(r) for r in rows)
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return sum(rows[i][i] for i in range(len(rows))) / total


def mcc_binary(cm: np.ndarray) -> float:
    """Correlation coefficient of a 2x2 matrix (class 1 as positive); a zero
    factor in the denominator yields 0 by convention."""
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise ValueError("mcc_binary needs a 2x2 confusion matrix")
    (tn, fp), (fn, tp) = cm.tolist()
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(den)


def mcc_multiclass(cm: np.ndarray) -> float:
    """Multiclass correlation between predictions and labels (covariance
    form over the confusion matrix); equals the binary formula at K = 2."""
    rows = np.asarray(cm).tolist()
    k = len(rows)
    correct = sum(rows[i][i] for i in range(k))
    total = sum(sum(r) for r in rows)
    true_marg = [sum(r) for r in rows]
    pred_marg = [sum(rows[r][i] for r in range(k)) for i in range(k)]
    num = correct * total - sum(t * p for t, p in zip(true_marg, pred_marg))
    d1 = total * total - sum(p * p for p in pred_marg)
    d2 = total * total - sum(t * t for t in true_marg)
    den = d1 * d2
    if den <= 0:
        return 0.0
    return num / math.sqrt(den)


@dataclass
class MetricsReport:
    """Headline metrics under one declared averaging mode, plus the
    per-class table and the confusion matrix they derive from."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    averaging: str
    per_class: list[dict]
    confusion_matrix: np.ndarray
    class_names: list[str] | None = None

    @classmethod
    def from_confusion(cls, cm: np.ndarray, averaging: str = "weighted",
                       class_names: list[str] | None = None) -> "MetricsReport":
        p, r, f1 = prf1(cm, averaging)
        return cls(accuracy=accuracy(cm), precision=p, recall=r, f1=f1,
                   mcc=mcc_multiclass(cm), averaging=averaging,
                   per_class=per_class_prf1(cm), confusion_matrix=cm,
                   class_names=class_names)

    @classmethod
    def from_predictions(cls, preds, labels, num_classes: int,
                         averaging: str = "weighted",
                         class_names: list[str] | None = None) -> "MetricsReport":
        return cls.from_confusion(confusion(preds, labels, num_classes),
                                  averaging, class_names)

    def _name(self, i: int) -> str:
        return self.class_names[i] if self.class_names else str(i)

    def to_tsv(self) -> str:
        lines = ["metric\tvalue"]
        for key in ("accuracy", "precision", "recall", "f1", "mcc"):
            lines.append(f"{key}\t{getattr(self, key):.6f}")
        lines.append(f"averaging\t{self.averaging}")
        lines.append("")
        lines.append("class\tsupport\tprecision\trecall\tf1")
        for row in self.per_class:
            lines.append(f"{self._name(row['class_id'])}\t{row['support']}"
                         f"\t{row['precision']:.6f}\t{row['recall']:.6f}"
                         f"\t{row['f1']:.6f}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        """Human-readable summary; percentages to two decimals."""
        def pct(x: float) -> str:
            return f"{100.0 * x:.2f}"

        lines = [f"{'':<10}{'Prec.':>8}{'Rec.':>8}{'F1':>8}{'Acc.':>8}{'MCC':>8}"]
        for mode in AVERAGING_MODES:
            p, r, f1 = prf1(self.confusion_matrix, mode)
            lines.append(f"{mode:<10}{pct(p):>8}{pct(r):>8}{pct(f1):>8}"
                         f"{pct(self.accuracy):>8}{pct(self.mcc):>8}")
        lines.append("")
        lines.append(f"{'class':<24}{'support':>8}{'prec.':>8}{'rec.':>8}{'F1':>8}")
        for row in self.per_class:
            lines.append(f"{self._name(row['class_id']):<24}{row['support']:>8}"
                         f"{pct(row['precision']):>8}{pct(row['recall']):>8}"
                         f"{pct(row['f1']):>8}")
        return "\n".join(lines) + "\n"
