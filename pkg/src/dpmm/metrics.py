"""Binary classification metrics and percentile bootstrap intervals."""
from __future__ import annotations

import logging
from typing import Callable

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


class CIFailure(RuntimeError):
    pass


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape or scores.size == 0:
        raise ValueError("scores and labels must be nonempty and of equal length")
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(bool)


def auroc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count 1/2)."""
    scores, pos = _check(scores, labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision, with tied scores forming a single cutoff."""
    scores, pos = _check(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], pos[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(precision * d_recall))


def f1(scores, labels, threshold: float = 0.5) -> float:
    scores, pos = _check(scores, labels)
    pred = scores >= threshold
    tp = np.sum(pred & pos)
    fp = np.sum(pred & ~pos)
    fn = np.sum(~pred & pos)
    if tp == 0:
        return 0.0
    return float(2 * tp / (2 * tp + fp + fn))


METRICS: dict[str, Callable] = {"auroc": auroc, "aupr": aupr, "f1": f1}


def bootstrap_samples(scores, labels, metric: Callable, B: int = 1000, seed=0, max_retries: int = 10):
    """Metric values over ``B`` resamples with replacement.

    Resamples containing one class, or on which ``metric`` raises
    :class:`UndefinedMetricError`, are redrawn up to ``max_retries`` times and
    then skipped. Returns ``(values, n_skipped)``.
    """
    if B < 100:
        raise ValueError("need at least 100 bootstrap resamples")
    scores, pos = _check(scores, labels)
    labels = pos.astype(int)
    rng = np.random.default_rng(seed)
    n = scores.size
    values, skipped = [], 0
    for _ in range(B):
        for _attempt in range(max_retries + 1):
            idx = rng.integers(0, n, size=n)
            yb = labels[idx]
            if not 0 < yb.sum() < n:
                continue
            try:
                values.append(metric(scores[idx], yb))
                break
            except UndefinedMetricError:
                continue
        else:
            skipped += 1
    if skipped > B / 2:
        raise CIFailure(f"metric undefined on {skipped} of {B} resamples")
    if skipped:
        log.warning("bootstrap skipped %d single-class resamples", skipped)
    return np.asarray(values), skipped


def bootstrap_ci(scores, labels, metric: Callable, B: int = 1000, seed=0, level: float = 0.95):
    """Percentile bootstrap interval ``(lo, hi)``."""
    values, _ = bootstrap_samples(scores, labels, metric, B=B, seed=seed)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def evaluate(scores, labels, B: int = 1000, seed=0, threshold: float = 0.5) -> dict:
    """Point metrics plus bootstrap intervals in one dict."""
    out = {
        "auroc": auroc(scores, labels),
        "aupr": aupr(scores, labels),
        "f1": f1(scores, labels, threshold),
        "ci": {},
    }
    for name, fn in (("auroc", auroc), ("aupr", aupr), ("f1", lambda s, y: f1(s, y, threshold))):
        out["ci"][name] = list(bootstrap_ci(scores, labels, fn, B=B, seed=seed))
    return out
