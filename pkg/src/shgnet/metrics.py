"""Confusion matrices, precision/recall/F1, ROC and precision-recall curves."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError


def confusion_matrix(true_labels, predicted_labels, k: int) -> np.ndarray:
    """``k x k`` counts with rows = true class and columns = predicted class."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise DataError(f"label arrays differ in length: {t.size} vs {p.size}")
    bad = (t < 0) | (t >= k) | (p < 0) | (p >= k)
    if bad.any():
        raise DataError(f"labels outside [0, {k}) at positions {np.flatnonzero(bad)[:10].tolist()}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def classification_metrics(cm: np.ndarray) -> dict:
    """Per-class and macro-averaged precision, recall and F1 plus accuracy.

    A metric whose denominator is zero is reported as 0.0 and the class index
    is listed under ``zero_division``.
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise DataError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    actual_pos = cm.sum(axis=1)
    flagged = {"precision": np.flatnonzero(pred_pos == 0).tolist(),
               "recall": np.flatnonzero(actual_pos == 0).tolist()}
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, actual_pos, out=np.zeros_like(tp), where=actual_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "accuracy": float(tp.sum() / total),
        "zero_division": flagged,
    }


@dataclass
class Curve:
    """Threshold sweep. ``x``/``y`` are (fpr, tpr) for ROC, (recall, precision) for PR."""

    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray
    area: float

    def to_dict(self) -> dict:
        return {"thresholds": [float(t) for t in self.thresholds],
                "x": [float(v) for v in self.x], "y": [float(v) for v in self.y],
                "area": float(self.area)}


def _sweep(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be 1-D arrays of equal length")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # index of the last sample of each block of equal scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return s[last], tp, fp, int(y.sum()), int((~y).sum())


def roc_curve(scores, labels) -> Curve:
    """ROC points over every distinct score, anchored at (0, 0) and (1, 1).

    Tied scores move TPR and FPR together in one step, so the trapezoidal
    area equals the Mann-Whitney probability with ties counted as 1/2.
    """
    thr, tp, fp, n_pos, n_neg = _sweep(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both positive and negative samples")
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    area = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return Curve(np.r_[np.inf, thr], fpr, tpr, area)


def pr_curve(scores, labels) -> Curve:
    """Precision/recall at each distinct threshold (descending) and average precision.

    AP is the step sum ``sum_i (R_i - R_{i-1}) * P_i`` with ``R_0 = 0``.
    """
    thr, tp, fp, n_pos, _ = _sweep(scores, labels)
    if n_pos == 0:
        raise DataError("precision-recall needs at least one positive sample")
    recall = tp / n_pos
    precision = tp / (tp + fp)
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return Curve(thr, recall, precision, ap)


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=1)


def one_vs_rest_report(scores: np.ndarray, labels, k: Optional[int] = None) -> list[Optional[dict]]:
    """ROC and PR curve for each class against the rest (column ``c`` scores).

    Classes that are absent (or the only class present) get ``None``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = k or scores.shape[1]
    if k < 2:
        raise DataError("one-vs-rest needs at least two classes")
    out: list[Optional[dict]] = []
    for c in range(k):
        positive = labels == c
        if positive.all() or not positive.any():
            out.append(None)
            continue
        out.append({"roc": roc_curve(scores[:, c], positive), "pr": pr_curve(scores[:, c], positive)})
    return out


@dataclass
class EvalReport:
    classes: tuple[str, ...]
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    zero_division: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)

    def auc(self, cls: str) -> Optional[float]:
        c = self.curves[self.classes.index(cls)]
        return None if c is None else c["roc"].area

    def average_precision(self, cls: str) -> Optional[float]:
        c = self.curves[self.classes.index(cls)]
        return None if c is None else c["pr"].area

    def to_dict(self) -> dict:
        per_class = {}
        for i, name in enumerate(self.classes):
            c = self.curves[i] if self.curves else None
            per_class[name] = {
                "precision": float(self.precision[i]),
                "recall": float(self.recall[i]),
                "f1": float(self.f1[i]),
                "roc_auc": None if c is None else c["roc"].area,
                "average_precision": None if c is None else c["pr"].area,
            }
        return {
            "classes": list(self.classes),
            "confusion_matrix": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": per_class,
            "zero_division": self.zero_division,
            "curves": {name: (None if c is None else {"roc": c["roc"].to_dict(), "pr": c["pr"].to_dict()})
                       for name, c in zip(self.classes, self.curves)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, out_dir, stem: str = "eval") -> list[Path]:
        """Write ``<stem>.json`` plus per-class ROC/PR CSVs; returns the paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / f"{stem}.json"]
        paths[0].write_text(self.to_json())
        for name, c in zip(self.classes, self.curves):
            if c is None:
                continue
            roc_path = out_dir / f"{stem}_roc_{name}.csv"
            pr_path = out_dir / f"{stem}_pr_{name}.csv"
            write_curve_csv(roc_path, c["roc"], ("threshold", "fpr", "tpr"))
            write_curve_csv(pr_path, c["pr"], ("threshold", "recall", "precision"))
            paths += [roc_path, pr_path]
        return paths


def write_curve_csv(path, curve: Curve, header: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, x, y in zip(curve.thresholds, curve.x, curve.y):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def read_curve_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=np.float64).reshape(-1, len(rows[0]))


def build_report(scores: np.ndarray, labels, classes: Sequence[str]) -> EvalReport:
    """Full evaluation from per-sample class scores and integer true labels."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    k = len(classes)
    cm = confusion_matrix(labels, predict(scores), k)
    m = classification_metrics(cm)
    return EvalReport(
        classes=tuple(classes), confusion=cm, precision=m["precision"], recall=m["recall"],
        f1=m["f1"], macro_precision=m["macro_precision"], macro_recall=m["macro_recall"],
        macro_f1=m["macro_f1"], accuracy=m["accuracy"], zero_division=m["zero_division"],
        curves=one_vs_rest_report(scores, labels, k),
    )
