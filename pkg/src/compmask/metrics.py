"""Segmentation metrics from one-vs-rest confusion counts.

Conventions:
  - degenerate zero denominators give 0 (and are detectable from counts);
  - average precision integrates a step-wise PR curve with tied scores
    grouped, so constant scores give AP equal to the positive prevalence;
  - multi-class mAP is the mean of per-class one-vs-rest APs over classes
    that have at least one positive pixel in the truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray  # per class
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)


def confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.min(initial=0) < 0 or arr.max(initial=0) >= num_classes:
            raise ValueError(f"{name} holds labels outside [0, {num_classes})")
    total = pred.size
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    tn = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        p = pred == c
        t = truth == c
        tp[c] = np.count_nonzero(p & t)
        fp[c] = np.count_nonzero(p & ~t)
        fn[c] = np.count_nonzero(~p & t)
        tn[c] = total - tp[c] - fp[c] - fn[c]
    return ConfusionCounts(tp, fp, fn, tn)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def iou(counts: ConfusionCounts) -> np.ndarray:
    return _safe_div(counts.tp, counts.tp + counts.fp + counts.fn)


def f1(counts: ConfusionCounts) -> np.ndarray:
    return _safe_div(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)


def mcc(counts: ConfusionCounts) -> np.ndarray:
    tp, fp = counts.tp.astype(np.float64), counts.fp.astype(np.float64)
    fn, tn = counts.fn.astype(np.float64), counts.tn.astype(np.float64)
    den = np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return _safe_div(tp * tn - fp * fn, den)


def average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    """Area under the step-wise precision-recall curve, ties grouped."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel().astype(bool)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth must have the same size")
    if scores.min(initial=0.0) < 0.0 or scores.max(initial=0.0) > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    n_pos = int(truth.sum())
    if n_pos == 0:
        log.warning("average_precision: no positives in truth, returning 0")
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truth[order]
    cum_tp = np.cumsum(t)
    cum_pred = np.arange(1, len(s) + 1)
    # last index of each tied-score group
    group_end = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    precision = cum_tp[group_end] / cum_pred[group_end]
    recall = cum_tp[group_end] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))
