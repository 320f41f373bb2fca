"""Calibration and uncertainty metrics over predictive probabilities.

Confidence bins are right-closed: confidence ``c`` falls in bin ``b`` (1-based)
when ``(b-1)/M < c <= b/M``; ``c = 0`` goes to bin 1.
"""
import csv
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import rankdata

PROB_FLOOR = 1e-12
N_ENTROPY_BINS = 50


def _labels(labels):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    return labels.astype(np.int64)


def nll(probs, labels, return_clamped=False):
    """Mean negative log probability of the true class.

    Probabilities below ``1e-12`` are clamped; with ``return_clamped`` the
    number of clamped rows is returned as well.
    """
    probs = np.asarray(probs, dtype=float)
    labels = _labels(labels)
    p = probs[np.arange(len(labels)), labels]
    clamped = int(np.sum(p < PROB_FLOOR))
    value = float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))
    return (value, clamped) if return_clamped else value


def bin_index(conf, n_bins):
    """0-based bin of each confidence under the right-closed convention."""
    idx = np.ceil(np.asarray(conf, dtype=float) * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


@dataclass
class CalibrationBins:
    edges: np.ndarray
    count: np.ndarray
    confidence: np.ndarray  # nan for empty bins
    accuracy: np.ndarray  # nan for empty bins

    @property
    def n_bins(self):
        return len(self.count)

    def rows(self):
        for b in range(self.n_bins):
            empty = self.count[b] == 0
            yield {
                "bin": b + 1,
                "lower": float(self.edges[b]),
                "upper": float(self.edges[b + 1]),
                "count": int(self.count[b]),
                "confidence": None if empty else float(self.confidence[b]),
                "accuracy": None if empty else float(self.accuracy[b]),
            }


def _conf_correct(probs, labels):
    probs = np.asarray(probs, dtype=float)
    labels = _labels(labels)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    return conf, correct


def calibration_curve(probs, labels, n_bins=20):
    conf, correct = _conf_correct(probs, labels)
    idx = bin_index(conf, n_bins)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct.astype(float), minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(count > 0, conf_sum / np.maximum(count, 1), np.nan)
        mean_acc = np.where(count > 0, acc_sum / np.maximum(count, 1), np.nan)
    return CalibrationBins(np.linspace(0.0, 1.0, n_bins + 1), count, mean_conf, mean_acc)


def ece(probs, labels, n_bins=20):
    """Expected calibration error ``sum_b (n_b / N) |acc_b - conf_b|``."""
    bins = calibration_curve(probs, labels, n_bins)
    n = bins.count.sum()
    occ = bins.count > 0
    gaps = np.abs(bins.accuracy[occ] - bins.confidence[occ])
    return float(np.sum(bins.count[occ] / n * gaps))


def auroc(scores, positive):
    """Probability a random positive scores above a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative example")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, positive):
    """ROC points ``(threshold, fpr, tpr)`` for thresholds at every distinct score."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    thr = np.r_[np.inf, s[last]]
    tpr = np.r_[0.0, tp[last] / max(p.sum(), 1)]
    fpr = np.r_[0.0, fp[last] / max((~p).sum(), 1)]
    return thr, fpr, tpr


def fpr_at_tpr(scores_in, scores_out, tpr=0.95):
    """FPR on ``scores_out`` at the largest threshold whose in-distribution TPR >= ``tpr``.

    A score ``>= threshold`` counts as predicted in-distribution.
    """
    scores_in = np.sort(np.asarray(scores_in, dtype=float))[::-1]
    scores_out = np.asarray(scores_out, dtype=float)
    if len(scores_in) == 0 or len(scores_out) == 0:
        raise ValueError("both score sets must be nonempty")
    thresholds = np.unique(scores_in)[::-1]
    # count of in-scores >= each threshold
    counts = len(scores_in) - np.searchsorted(scores_in[::-1], thresholds, side="left")
    ok = counts / len(scores_in) >= tpr
    t = thresholds[np.argmax(ok)]
    return float(np.mean(scores_out >= t))


def fpr_at_95_tpr(scores_in, scores_out):
    return fpr_at_tpr(scores_in, scores_out, 0.95)


def predictive_entropy(probs):
    """Row-wise Shannon entropy with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)


def entropy_histogram(entropies, n_classes, n_bins=N_ENTROPY_BINS):
    hi = math.log(n_classes)
    h = np.clip(np.asarray(entropies, dtype=float), 0.0, hi)
    counts, edges = np.histogram(h, bins=n_bins, range=(0.0, hi))
    return counts, edges


@dataclass
class MetricsReport:
    n: int
    accuracy: float
    nll: float
    nll_clamped: int
    ece: float
    auroc: float | None
    calibration: CalibrationBins
    entropy_counts: np.ndarray
    entropy_edges: np.ndarray
    fpr_at_95tpr: float | None = None
    extra: dict = field(default_factory=dict)

    def summary(self):
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "nll": self.nll,
            "nll_clamped": self.nll_clamped,
            "ece": self.ece,
            "auroc": self.auroc,
            "fpr_at_95tpr": self.fpr_at_95tpr,
            "mean_entropy": self.extra.get("mean_entropy"),
        }


def evaluate(probs, labels, n_bins=20):
    """Full report for one set of predictions.

    In-distribution AUROC ranks correct predictions (positives) against
    incorrect ones by confidence; it is ``None`` if every prediction is
    correct or every one is wrong.
    """
    probs = np.asarray(probs, dtype=float)
    labels = _labels(labels)
    conf, correct = _conf_correct(probs, labels)
    value, clamped = nll(probs, labels, return_clamped=True)
    try:
        roc = auroc(conf, correct)
    except ValueError:
        roc = None
    ent = predictive_entropy(probs)
    counts, edges = entropy_histogram(ent, probs.shape[1])
    return MetricsReport(
        n=len(labels),
        accuracy=float(correct.mean()),
        nll=value,
        nll_clamped=clamped,
        ece=ece(probs, labels, n_bins),
        auroc=roc,
        calibration=calibration_curve(probs, labels, n_bins),
        entropy_counts=counts,
        entropy_edges=edges,
        extra={"mean_entropy": float(ent.mean())},
    )


# -- file emission ------------------------------------------------------------

def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_calibration_csv(path, bins):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["bin", "lower", "upper", "count", "confidence", "accuracy"])
        w.writeheader()
        for row in bins.rows():
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})


def write_roc_csv(path, scores, positive):
    thr, fpr, tpr = roc_curve(scores, positive)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for row in zip(thr, fpr, tpr):
            w.writerow([repr(float(v)) for v in row])


def write_histogram_csv(path, counts, edges):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lower", "upper", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
