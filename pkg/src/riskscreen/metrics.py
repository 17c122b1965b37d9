"""Ranking metrics, bootstrap intervals and screening arithmetic.

Tie rule used everywhere: patients are ranked by descending score and equal scores keep their
input order (stable sort). ROC AUC is the exception, it counts score ties as one half.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import BootstrapError, UndefinedStatisticError


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same shape")
    return s, y


def rank_order(scores) -> np.ndarray:
    """Indices from highest to lowest score, ties in input order."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def average_precision(scores, labels) -> float:
    """Mean of precision@k taken at the rank k of every positive."""
    s, y = _as_arrays(scores, labels)
    n_pos = y.sum()
    if n_pos == 0:
        raise UndefinedStatisticError("average precision needs at least one positive")
    hits = y[rank_order(s)]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.cumsum(hits)[ranks - 1] / ranks))


def average_precision_batch(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise average precision for 2-D score/label matrices."""
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = np.take_along_axis(labels, order, axis=1).astype(float)
    ranks = np.arange(1, scores.shape[1] + 1)
    prec = np.cumsum(hits, axis=1) / ranks
    n_pos = hits.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (prec * hits).sum(axis=1) / n_pos


def roc_auc(scores, labels) -> float:
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedStatisticError("ROC AUC needs both classes")
    r = stats.rankdata(s)
    return float((r[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc_batch(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    r = stats.rankdata(scores, axis=1)
    n_pos = labels.sum(axis=1)
    n_neg = labels.shape[1] - n_pos
    with np.errstate(invalid="ignore", divide="ignore"):
        return ((r * labels).sum(axis=1) - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def precision_at_top(scores, labels, k: int) -> float:
    s, y = _as_arrays(scores, labels)
    if not 1 <= k <= len(y):
        raise ValueError(f"k={k} outside 1..{len(y)}")
    return float(y[rank_order(s)[:k]].sum() / k)


def cumulative_hits(scores, labels) -> np.ndarray:
    """Confirmed count among the top k, for k = 1..n."""
    s, y = _as_arrays(scores, labels)
    return np.cumsum(y[rank_order(s)])


def precision_at_top_curve(scores, labels, ks: Sequence[int], level: float = 0.95):
    """Rows (k, precision, ci_low, ci_high); Wilson intervals on the top-k proportion."""
    hits = cumulative_hits(scores, labels)
    rows = []
    for k in ks:
        if not 1 <= k <= len(hits):
            raise ValueError(f"k={k} outside 1..{len(hits)}")
        c = int(hits[k - 1])
        ci = stats.binomtest(c, k).proportion_ci(confidence_level=level, method="wilson")
        rows.append((int(k), c / k, float(ci.low), float(ci.high)))
    return rows


# --- bootstrap ----------------------------------------------------------------------------


@dataclass
class MetricReport:
    metric: str
    value: float
    ci_low: float
    ci_high: float
    level: float
    n_bootstrap: int
    seed: int
    n: int
    n_positive: int

    def to_dict(self):
        return asdict(self)


_BATCH = {"average_precision": average_precision_batch, "roc_auc": roc_auc_batch}
_SCALAR = {"average_precision": average_precision, "roc_auc": roc_auc}


def _metric_fns(metric):
    if isinstance(metric, str):
        return metric, _SCALAR[metric], _BATCH[metric]
    name = getattr(metric, "__name__", "metric")
    batch = _BATCH.get(name) if _SCALAR.get(name) is metric else None

    def loop(S, Y):
        return np.array([metric(s, y) for s, y in zip(S, Y)])

    return name, metric, batch or loop


def bootstrap_indices(labels, n_boot: int, seed: int, max_factor: int = 10) -> np.ndarray:
    """Resample indices with replacement, redrawing resamples that lack a class."""
    y = np.asarray(labels, dtype=int)
    n = len(y)
    rng = np.random.default_rng(seed)
    kept = []
    drawn = 0
    while sum(len(k) for k in kept) < n_boot:
        if drawn >= max_factor * n_boot:
            raise BootstrapError("too many single-class resamples; bootstrap budget exhausted")
        batch = min(n_boot, max_factor * n_boot - drawn)
        idx = rng.integers(0, n, size=(batch, n))
        drawn += batch
        pos = y[idx].sum(axis=1)
        kept.append(idx[(pos > 0) & (pos < n)])
    return np.concatenate(kept)[:n_boot]


def bootstrap_ci(metric, scores, labels, n_boot: int = 1000, level: float = 0.95,
                 seed: int = 0) -> MetricReport:
    """Percentile bootstrap interval, widened if needed to contain the point estimate."""
    s, y = _as_arrays(scores, labels)
    name, scalar, batch = _metric_fns(metric)
    value = scalar(s, y)
    idx = bootstrap_indices(y, n_boot, seed)
    reps = batch(s[idx], y[idx])
    alpha = (1 - level) / 2
    lo, hi = np.quantile(reps, [alpha, 1 - alpha])
    return MetricReport(name, float(value), float(min(lo, value)), float(max(hi, value)), level,
                        n_boot, seed, len(y), int(y.sum()))


def paired_bootstrap(metric, scores_a, scores_b, labels, n_boot: int = 1000,
                     seed: int = 0) -> dict:
    """One-sided paired bootstrap of metric(a) - metric(b) on shared resamples.

    The p-value is (1 + #{diff <= 0}) / (n_boot + 1) for the alternative metric(a) > metric(b).
    """
    a, y = _as_arrays(scores_a, labels)
    b, _ = _as_arrays(scores_b, labels)
    name, scalar, batch = _metric_fns(metric)
    idx = bootstrap_indices(y, n_boot, seed)
    diff = batch(a[idx], y[idx]) - batch(b[idx], y[idx])
    return {
        "metric": name, "value_a": scalar(a, y), "value_b": scalar(b, y),
        "mean_difference": float(diff.mean()),
        "p_value": float((1 + np.sum(diff <= 0)) / (n_boot + 1)),
        "n_bootstrap": n_boot, "seed": seed,
    }


def nns_to_rate(nns: float) -> int:
    """Cancers detected per 1000 screened, from the number needed to screen (half-up)."""
    if not nns > 0:
        raise ValueError("number needed to screen must be positive")
    return math.floor(1000.0 / nns + 0.5)


def metric_summary(scores, labels, n_boot=1000, level=0.95, seed=0) -> dict:
    return {m: bootstrap_ci(m, scores, labels, n_boot, level, seed).to_dict()
            for m in ("average_precision", "roc_auc")}

