"""Ranking and thresholded evaluation for multi-label predictions.

Average precision follows the information-retrieval convention: the mean of
precision evaluated at each positive when samples are ranked by descending
score, ties broken by stable sample index. mAP averages AP over classes
with at least one positive. OF1 micro-aggregates TP/FP/FN over all
(sample, class) decisions; CF1 averages per-class F1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class EvalReport:
    per_class_ap: np.ndarray  # nan where the class had no positives
    map_score: float
    of1: float
    cf1: float
    support: np.ndarray  # positives per class

    def to_rows(self):
        rows = [["class", "ap", "support"]]
        for c, (ap, sup) in enumerate(zip(self.per_class_ap, self.support)):
            rows.append([c, "" if np.isnan(ap) else f"{ap:.6f}", int(sup)])
        rows.append(["mAP", f"{self.map_score:.6f}", ""])
        rows.append(["OF1", f"{self.of1:.6f}", ""])
        rows.append(["CF1", f"{self.cf1:.6f}", ""])
        return rows

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(self.to_rows())

    def to_markdown(self):
        lines = ["| metric | value |", "| --- | --- |",
                 f"| mAP | {self.map_score:.4f} |",
                 f"| OF1 | {self.of1:.4f} |",
                 f"| CF1 | {self.cf1:.4f} |"]
        return "\n".join(lines)


def average_precision(scores, truths):
    """AP of one class. truths are binary; requires at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    if truths.sum() == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    ranked = truths[order]
    hits = np.cumsum(ranked)
    precision_at_pos = hits[ranked] / (np.flatnonzero(ranked) + 1)
    return float(precision_at_pos.mean())


def mean_average_precision(scores, truths):
    """(per-class AP with nan for empty classes, mAP over non-empty classes)."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    c = scores.shape[1]
    aps = np.full(c, np.nan)
    for j in range(c):
        if (truths[:, j] == 1).sum() > 0:
            aps[j] = average_precision(scores[:, j], truths[:, j] == 1)
    covered = ~np.isnan(aps)
    return aps, float(aps[covered].mean()) if covered.any() else 0.0


def f1_measures(probabilities, truths, decision_threshold=0.5):
    """(OF1, CF1) at a fixed decision threshold; 0/0 F1 is defined as 0."""
    probs = np.asarray(probabilities, dtype=np.float64)
    truths = np.asarray(truths)
    pred = probs >= decision_threshold
    actual = truths == 1

    tp = (pred & actual).sum()
    fp = (pred & ~actual).sum()
    fn = (~pred & actual).sum()
    of1 = 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0

    tp_c = (pred & actual).sum(axis=0).astype(np.float64)
    fp_c = (pred & ~actual).sum(axis=0).astype(np.float64)
    fn_c = (~pred & actual).sum(axis=0).astype(np.float64)
    denom = 2 * tp_c + fp_c + fn_c
    f1_c = np.where(denom > 0, 2 * tp_c / np.maximum(denom, 1.0), 0.0)
    return float(of1), float(f1_c.mean())


def evaluate(probabilities, truths, decision_threshold=0.5) -> EvalReport:
    aps, map_score = mean_average_precision(probabilities, truths)
    of1, cf1 = f1_measures(probabilities, truths, decision_threshold)
    support = (np.asarray(truths) == 1).sum(axis=0)
    return EvalReport(aps, map_score, of1, cf1, support)


def pseudo_label_quality(pseudo, full_truth, mask):
    """Precision/recall of pseudo positives over masked (unknown) positions.

    Returns (precision, recall) with precision None when nothing was
    emitted. full_truth uses +1/-1; mask marks positions that were unknown
    during training.
    """
    pseudo = np.asarray(pseudo).astype(bool)
    actual = np.asarray(full_truth) == 1
    mask = np.asarray(mask).astype(bool)
    emitted = pseudo & mask
    relevant = actual & mask
    tp = (emitted & relevant).sum()
    precision = float(tp / emitted.sum()) if emitted.sum() > 0 else None
    recall = float(tp / relevant.sum()) if relevant.sum() > 0 else 0.0
    return precision, recall
