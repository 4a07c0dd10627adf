"""Classification metrics derived from a confusion matrix.

All one-vs-rest quantities are macro-averaged over classes. Rows of the
confusion matrix are true labels, columns are predictions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import trapezoid


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    for name, y in (("label", y_true), ("prediction", y_pred)):
        bad = (y < 0) | (y >= n_classes)
        if bad.any():
            raise ValueError(f"{name} {int(y[bad][0])} outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b != 0)


def cohen_kappa(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    if n == 0:
        return 0.0
    p_o = np.trace(cm) / n
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / n**2
    if p_e == 1.0:
        # a single class on both sides: perfect but chance-degenerate agreement
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1 - p_e))


def pr_curve(y: np.ndarray, score: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Precision/recall at every distinct score threshold, ending at (recall 0, precision 1)."""
    order = np.argsort(-score, kind="mergesort")
    y, score = y[order], score[order]
    last = np.r_[np.flatnonzero(np.diff(score)), y.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    # drop thresholds past full recall, then reverse so recall decreases
    stop = int(np.searchsorted(tp, tp[-1])) + 1
    precision = np.r_[precision[:stop][::-1], 1.0]
    recall = np.r_[recall[:stop][::-1], 0.0]
    return precision, recall


def pr_auc_macro(labels, scores) -> float:
    """Mean over classes (with at least one positive) of the trapezoidal PR-curve area."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    areas = []
    for c in range(scores.shape[1]):
        y = (labels == c).astype(np.int64)
        if y.sum() == 0:
            continue
        precision, recall = pr_curve(y, scores[:, c])
        areas.append(-trapezoid(precision, recall))
    return float(np.mean(areas)) if areas else float("nan")


@dataclass
class EvalReport:
    accuracy: float
    sensitivity: float
    specificity: float
    macro_f1: float
    kappa: float
    precision: float
    recall: float
    f1: float
    pr_auc: float | None
    confusion_matrix: list[list[int]]

    @classmethod
    def from_confusion(cls, cm, labels=None, scores=None) -> "EvalReport":
        cm = np.asarray(cm, dtype=np.int64)
        total = cm.sum()
        tp = np.diag(cm).astype(np.float64)
        support = cm.sum(axis=1)
        predicted = cm.sum(axis=0)
        fp = predicted - tp
        tn = total - support - fp
        recall_c = _div(tp, support)
        precision_c = _div(tp, predicted)
        spec_c = _div(tn, tn + fp)
        f1_c = _div(2 * tp, support + predicted)
        precision, recall = float(precision_c.mean()), float(recall_c.mean())
        pr_auc = pr_auc_macro(labels, scores) if scores is not None else None
        return cls(
            accuracy=float(tp.sum() / total) if total else 0.0,
            sensitivity=recall,
            specificity=float(spec_c.mean()),
            macro_f1=float(f1_c.mean()),
            kappa=cohen_kappa(cm),
            precision=precision,
            recall=recall,
            f1=float(2 * precision * recall / (precision + recall)) if precision + recall else 0.0,
            pr_auc=pr_auc,
            confusion_matrix=cm.tolist(),
        )

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int, scores=None) -> "EvalReport":
        cm = confusion_matrix(y_true, y_pred, n_classes)
        return cls.from_confusion(cm, y_true, scores)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"
