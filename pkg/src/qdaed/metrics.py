"""Clip-level ROC-AUC and DET equal error rate, per class and averaged."""

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import MetricUndefinedError, ShapeError


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(f"need at least one positive and one negative (got {n_pos}/{n_neg})")
    return scores, pos, n_pos, n_neg


def roc_auc(scores, labels):
    """Probability a random positive outscores a random negative; ties count one half."""
    scores, pos, n_pos, n_neg = _split(scores, labels)
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def det_points(scores, labels):
    """``(thresholds, fpr, fnr)`` for "positive iff score >= threshold".

    Thresholds are the distinct scores ascending followed by ``+inf``.
    """
    scores, pos, n_pos, n_neg = _split(scores, labels)
    thresholds = np.append(np.unique(scores), np.inf)
    pos_sorted = np.sort(scores[pos])
    neg_sorted = np.sort(scores[~pos])
    fnr = np.searchsorted(pos_sorted, thresholds, side="left") / n_pos
    fpr = (n_neg - np.searchsorted(neg_sorted, thresholds, side="left")) / n_neg
    return thresholds, fpr, fnr


def det_eer(scores, labels):
    """Equal error rate, linearly interpolated where FNR - FPR changes sign."""
    _, fpr, fnr = det_points(scores, labels)
    d = fnr - fpr
    j = int(np.argmax(d >= 0))
    if d[j] == 0:
        return float(fpr[j])
    lam = -d[j - 1] / (d[j] - d[j - 1])
    return float(fpr[j - 1] + lam * (fpr[j] - fpr[j - 1]))


def average_eer(probs, Y):
    probs = np.asarray(probs)
    return float(np.mean([det_eer(probs[:, c], Y[:, c]) for c in range(probs.shape[1])]))


@dataclass
class EvalReport:
    auc: list
    eer: list
    class_names: list
    mode: str = "fp"
    split: str = "test"
    model_metrics: dict = field(default_factory=dict)

    @property
    def avg_auc(self):
        return float(np.mean(self.auc))

    @property
    def avg_eer(self):
        return float(np.mean(self.eer))

    def as_dict(self):
        d = asdict(self)
        d["avg_auc"] = self.avg_auc
        d["avg_eer"] = self.avg_eer
        return d


def score_report(probs, Y, mode="fp", split="test", class_names=None, model_metrics=None):
    C = probs.shape[1]
    names = list(class_names or [f"class_{c}" for c in range(C)])
    auc = [roc_auc(probs[:, c], Y[:, c]) for c in range(C)]
    eer = [det_eer(probs[:, c], Y[:, c]) for c in range(C)]
    return EvalReport(auc, eer, names, mode, split, dict(model_metrics or {}))


def evaluate(student, X, Y, quantizer=None, mode="fp", split="test", class_names=None, model_metrics=None):
    """Score a student on ``(N, T, D)`` features and ``(N, C)`` labels."""
    from .lstm import FP, predict_proba

    probs = predict_proba(student, X, quantizer or FP)
    return score_report(probs, Y, mode, split, class_names, model_metrics), probs


def format_report(report):
    """Aligned text table: AUC and EER (%) per class plus the average."""
    cols = [*report.class_names, "Avg"]
    auc = [*report.auc, report.avg_auc]
    eer = [*report.eer, report.avg_eer]
    width = max(8, *(len(c) for c in cols))
    lines = [f"split={report.split} mode={report.mode}"]
    lines.append(f"{'':10}|" + "|".join(c.rjust(width) for c in cols))
    lines.append("-" * len(lines[-1]))
    lines.append(f"{'AUC (%)':10}|" + "|".join(f"{100 * v:.2f}".rjust(width) for v in auc))
    lines.append(f"{'EER (%)':10}|" + "|".join(f"{100 * v:.2f}".rjust(width) for v in eer))
    mm = report.model_metrics
    if mm:
        lines.append(f"{'Params (M)':10}| {mm['param_count'] / 1e6:.4f}")
        lines.append(f"{'Size (MB)':10}| {mm['param_bytes'] / (1 << 20):.4f}")
    return "\n".join(lines) + "\n"


def write_curves_csv(path, probs, Y, class_names=None):
    """ROC/DET points per class: ``class, threshold, fpr, tpr, fnr``."""
    C = probs.shape[1]
    names = list(class_names or [f"class_{c}" for c in range(C)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "threshold", "fpr", "tpr", "fnr"])
        for c in range(C):
            thr, fpr, fnr = det_points(probs[:, c], Y[:, c])
            for t, a, b in zip(thr, fpr, fnr):
                w.writerow([names[c], repr(float(t)), repr(float(a)), repr(float(1.0 - b)), repr(float(b))])
