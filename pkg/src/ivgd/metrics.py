"""Node-level classification metrics, ROC/AUC and regression errors.

Inputs may be vectors or ``(samples, n)`` arrays; everything is pooled over
nodes and samples (micro-average).
"""
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError


@dataclass
class MetricsReport:
    acc: float
    pr: float
    re: float
    fs: float
    auc: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    n: int

    def row(self):
        return asdict(self)


def _pair(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def classification_metrics(labels, truth):
    """ACC/PR/RE/FS from binary labels; degenerate PR or RE are reported as 0."""
    labels, truth = _pair(labels, truth)
    labels = labels.astype(bool)
    truth = truth.astype(bool)
    tp = int(np.sum(labels & truth))
    fp = int(np.sum(labels & ~truth))
    fn = int(np.sum(~labels & truth))
    tn = int(np.sum(~labels & ~truth))
    n = labels.size
    acc = (tp + tn) / n if n else 0.0
    pr = tp / (tp + fp) if tp + fp else 0.0
    re = tp / (tp + fn) if tp + fn else 0.0
    fs = 2 * pr * re / (pr + re) if pr + re > 0 else 0.0
    return MetricsReport(acc, pr, re, fs, None, tp, fp, tn, fn, n)


def _check_classes(truth):
    pos = int(truth.sum())
    if pos == 0 or pos == truth.size:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    return pos, truth.size - pos


def auc(scores, truth):
    """Mann-Whitney AUC: P(s_pos > s_neg) + 0.5 P(tie), via average ranks."""
    scores, truth = _pair(scores, truth)
    truth = truth.astype(bool)
    n_pos, n_neg = _check_classes(truth)
    ranks = rankdata(scores, method="average")
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, truth):
    """``(fpr, tpr)`` after admitting each distinct threshold, from (0,0) to (1,1)."""
    scores, truth = _pair(scores, truth)
    truth = truth.astype(bool)
    n_pos, n_neg = _check_classes(truth)
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(t)[last]
    fps = np.cumsum(~t)[last]
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points):
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def regression_metrics(pred, target):
    pred, target = _pair(pred, target)
    err = pred.astype(np.float64) - target
    return {"mse": float(np.mean(err * err)), "mae": float(np.mean(np.abs(err)))}


def evaluate(scores, labels, truth):
    """Full report; AUC is ``None`` when truth is single-class."""
    rep = classification_metrics(labels, truth)
    try:
        rep.auc = auc(scores, truth)
    except UndefinedMetricError:
        rep.auc = None
    return rep
