"""Ranking metrics (AU-ROC, average precision) and fold aggregation.

Undefined values (single-class inputs) are returned as ``nan`` and skipped
by the macro averages.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

UNDEFINED = float("nan")


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must have equal length")


def au_roc(scores, labels) -> float:
    """Mann-Whitney AU-ROC; ties between a positive and a negative count one half."""
    s = ScoredSet(scores, labels)
    n_pos = int(s.labels.sum())
    n_neg = s.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(s.scores)
    u = ranks[s.labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def au_pr(scores, labels) -> float:
    """Average precision with tied scores grouped into one threshold.

    AP = sum over distinct thresholds (descending) of (R_i - R_{i-1}) * P_i.
    """
    s = ScoredSet(scores, labels)
    n_pos = int(s.labels.sum())
    if n_pos == 0:
        return UNDEFINED
    order = np.argsort(-s.scores, kind="mergesort")
    sc = s.scores[order]
    lab = s.labels[order]
    tp = np.cumsum(lab)
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(sc))[0], sc.size - 1]
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def micro_macro(scores, labels) -> dict:
    """Micro and macro AU-ROC / AU-PR for an ``(instances, labels)`` score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores = scores[:, None]
        labels = labels[:, None]
    if scores.shape != labels.shape:
        raise ValueError("score and label matrices differ in shape")
    rocs = np.array([au_roc(scores[:, j], labels[:, j]) for j in range(scores.shape[1])])
    prs = np.array([au_pr(scores[:, j], labels[:, j]) for j in range(scores.shape[1])])
    if np.all(np.isnan(rocs)) and np.all(np.isnan(prs)):
        raise ValueError("no label has a defined metric")
    out = {
        "micro_auroc": au_roc(scores.ravel(), labels.ravel()),
        "macro_auroc": float(np.nanmean(rocs)) if not np.all(np.isnan(rocs)) else UNDEFINED,
        "micro_auprc": au_pr(scores.ravel(), labels.ravel()),
        "macro_auprc": float(np.nanmean(prs)) if not np.all(np.isnan(prs)) else UNDEFINED,
        "skipped_auroc": int(np.isnan(rocs).sum()),
        "skipped_auprc": int(np.isnan(prs).sum()),
    }
    return out


def aggregate(values) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation across folds."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("aggregation needs at least two folds")
    return float(v.mean()), float(v.std(ddof=1))


def aggregate_folds(per_fold: list[dict], keys=None) -> dict:
    """``{metric: {"mean": .., "std": ..}}`` over a list of per-fold metric dicts."""
    keys = keys or [k for k, v in per_fold[0].items() if isinstance(v, (int, float))]
    out = {}
    for key in keys:
        vals = [f[key] for f in per_fold if f.get(key) is not None and not math.isnan(f[key])]
        if len(vals) < 2:
            logger.warning("metric %s defined on fewer than two folds; skipped", key)
            continue
        mean, std = aggregate(vals)
        out[key] = {"mean": mean, "std": std, "n_folds": len(vals)}
    return out


def write_fold_csv(path, per_fold: list[dict], keys) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "metric", "value"])
        for i, f in enumerate(per_fold):
            for key in keys:
                w.writerow([i, key, repr(float(f[key]))])


def write_aggregate_json(path, table: dict) -> None:
    with open(path, "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
