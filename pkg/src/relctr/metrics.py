"""Offline ranking and calibration metrics."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; tied scores count one half."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks give ties half credit
    # rank sums of equal-score groups are multiples of 1/2, so doubling keeps this exact in floats
    u2 = 2.0 * ranks[y].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def brute_force_auc(scores, labels) -> float:
    """O(n^2) pair counting; reference implementation for tests."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def _groups(user_ids) -> dict:
    out: dict = {}
    for i, u in enumerate(np.asarray(user_ids).ravel().tolist()):
        out.setdefault(u, []).append(i)
    return out


def gauc(scores, labels, user_ids, impressions=None, auc_fn=auc) -> float:
    """Impression-weighted mean of per-user AUC over users that have both classes.

    ``impressions`` maps user -> weight; by default a user's sample count.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    num = den = 0.0
    for u, idx in _groups(user_ids).items():
        yy = y[idx]
        if yy.min() == yy.max():
            continue
        w = len(idx) if impressions is None else impressions[u]
        num += w * auc_fn(s[idx], yy)
        den += w
    if den == 0:
        raise UndefinedMetricError("GAUC has no user with both classes")
    return float(num / den)


def relaimpr(measured_auc: float, base_auc: float) -> float:
    """Relative improvement above the 0.5 floor, in percent."""
    if base_auc <= 0.5:
        raise UndefinedMetricError("RelaImpr base must exceed 0.5")
    return ((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0


def pcoc(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if y.sum() == 0:
        raise UndefinedMetricError("PCOC needs at least one click")
    return float(p.mean() / y.mean())


def irrelevant_rate_at_10(ranked_rsl: Sequence[Sequence[int]], k: int = 10) -> float:
    """Mean share of rsl==1 items in each list's top k (lists already ranked)."""
    if not ranked_rsl:
        raise UndefinedMetricError("no ranked lists")
    rates = []
    short = 0
    for lst in ranked_rsl:
        top = np.asarray(lst[:k])
        if len(lst) < k:
            short += 1
        if top.size == 0:
            continue
        rates.append(float((top == 1).sum()) / top.size)
    if short:
        log.warning("%d lists shorter than %d; evaluated at their own length", short, k)
    if not rates:
        raise UndefinedMetricError("all lists are empty")
    return float(np.mean(rates))
