"""Evaluation metrics for regression and binary tasks.

Conventions:
  * Acc-2 / F1 on regression outputs drop zero labels and compare signs
    (``> 0`` is positive); F1 is for the positive class.
  * Acc-7 clamps predictions to the label range and rounds both sides to the
    nearest integer (numpy rounding).  Acc-5 does the same on a [1, 7] scale
    and merges {1, 2} and {6, 7}.
  * Undefined ratios (0/0) are 0; Pearson with a constant side is 0.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


def _pair(preds, labels):
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise ValueError("no samples")
    return p, y


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def mae(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(np.abs(p - y)))


def pearson(preds, labels) -> float:
    p, y = _pair(preds, labels)
    if p.size < 2:
        return 0.0
    pc, yc = p - p.mean(), y - y.mean()
    spp, syy = float(pc @ pc), float(yc @ yc)
    if spp <= 1e-24 * float(p @ p) or syy <= 1e-24 * float(y @ y):
        return 0.0
    return float(np.clip((pc @ yc) / np.sqrt(spp * syy), -1.0, 1.0))


def acc7(preds, labels, label_range=(-3.0, 3.0)) -> float:
    p, y = _pair(preds, labels)
    lo, hi = label_range
    return float(np.mean(np.round(np.clip(p, lo, hi)) == np.round(np.clip(y, lo, hi))))


def _five_bins(x):
    return np.clip(np.round(np.clip(x, 1.0, 7.0)), 2.0, 6.0)


def acc5(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(_five_bins(p) == _five_bins(y)))


def _confusion(pred_pos: np.ndarray, true_pos: np.ndarray):
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    tn = int(np.sum(~pred_pos & ~true_pos))
    return tp, fp, fn, tn


def _f1(tp, fp, fn) -> float:
    prec, rec = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    return _ratio(2 * prec * rec, prec + rec)


def acc2_f1(preds, labels) -> tuple[float, float]:
    p, y = _pair(preds, labels)
    keep = y != 0
    if not keep.any():
        return 0.0, 0.0
    pred_pos, true_pos = p[keep] > 0, y[keep] > 0
    tp, fp, fn, tn = _confusion(pred_pos, true_pos)
    return _ratio(tp + tn, keep.sum()), _f1(tp, fp, fn)


def precision_recall(pred_classes, labels) -> tuple[float, float]:
    p = np.asarray(pred_classes).reshape(-1).astype(bool)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if p.shape != y.shape:
        raise ValueError("length mismatch")
    tp, fp, fn, _ = _confusion(p, y)
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn)


def logits_to_classes(logits) -> np.ndarray:
    """Threshold the logistic output at 0.5."""
    z = np.asarray(logits, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z)) >= 0.5


@dataclass
class MetricReport:
    n_samples: int
    mae: float | None = None
    corr: float | None = None
    acc2: float | None = None
    f1: float | None = None
    acc7: float | None = None
    acc5: float | None = None
    precision: float | None = None
    recall: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def primary(self, task: str) -> float:
        """Early-stopping criterion: lower is better."""
        return self.mae if task == "regression" else -self.acc2

    def csv_row(self) -> dict:
        row = {"n_samples": self.n_samples}
        for k in ("mae", "corr"):
            v = getattr(self, k)
            row[k] = "" if v is None else f"{v:.3f}"
        for k in ("acc2", "f1", "acc7", "acc5", "precision", "recall"):
            v = getattr(self, k)
            row[k] = "" if v is None else f"{100 * v:.1f}"
        return row


def evaluate(preds, labels, task: str = "regression", label_range=(-3.0, 3.0)) -> MetricReport:
    p, y = _pair(preds, labels)
    if task == "binary":
        cls = logits_to_classes(p)
        truth = y > 0.5
        tp, fp, fn, tn = _confusion(cls, truth)
        prec, rec = precision_recall(cls, truth)
        return MetricReport(n_samples=p.size, acc2=_ratio(tp + tn, p.size), f1=_f1(tp, fp, fn),
                            precision=prec, recall=rec)
    a2, f1 = acc2_f1(p, y)
    rep = MetricReport(n_samples=p.size, mae=mae(p, y), corr=pearson(p, y), acc2=a2, f1=f1,
                       acc7=acc7(p, y, label_range))
    if tuple(label_range) == (1.0, 7.0):
        rep.acc5 = acc5(p, y)
    return rep


def write_metrics_json(report: MetricReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_metrics_csv(rows: list[dict], path) -> None:
    """``rows`` are dicts (e.g. ``{"split": ..., **report.csv_row()}``) with a shared key set."""
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
