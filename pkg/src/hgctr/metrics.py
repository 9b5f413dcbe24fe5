"""Ranking and probabilistic metrics for binary click prediction."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractError, UndefinedMetricError

PROB_CLAMP = 1e-12


class LogLossResult(NamedTuple):
    value: float
    clamped: int

    def __float__(self) -> float:  # pragma: no cover - convenience
        return self.value


def _validate(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=np.float64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ContractError("labels and scores must have equal length")
    if y.size == 0:
        raise ContractError("empty metric input")
    if not np.isfinite(s).all():
        raise ContractError("scores contain non-finite values")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("labels must be 0 or 1")
    return y, s


def _pair_numerator_and_counts(y: np.ndarray, s: np.ndarray):
    """Numerator wins + 0.5*ties via tied average ranks, plus class counts.

    Every intermediate is a half-integer, so the result is the exact same
    float the O(n^2) pair count produces.
    """
    n_pos = float(y.sum())
    n_neg = float(y.size - y.sum())
    if n_pos == 0.0 or n_neg == 0.0:
        raise UndefinedMetricError(
            "AUC is undefined: both classes must be present")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    # rank sum of positives with average ranks over tie groups (1-based)
    boundaries = np.flatnonzero(np.diff(s_sorted)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s_sorted.size]))
    rank_sum_pos = 0.0
    pos_cum = np.concatenate(([0.0], np.cumsum(y_sorted)))
    for a, b in zip(starts, ends):
        group_pos = pos_cum[b] - pos_cum[a]
        if group_pos:
            avg_rank = (a + b + 1) / 2.0  # mean of ranks a+1 .. b
            rank_sum_pos += avg_rank * group_pos
    numerator = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0
    return numerator, n_pos, n_neg


def auc(labels, scores) -> float:
    """Area under the ROC curve via the tied-rank rank-sum statistic."""
    y, s = _validate(labels, scores)
    numerator, n_pos, n_neg = _pair_numerator_and_counts(y, s)
    return numerator / (n_pos * n_neg)


def auc_pair_counting(labels, scores) -> float:
    """Reference O(n^2) AUC: fraction of (positive, negative) pairs ranked
    correctly, ties counted half. Kept as the oracle for the fast path."""
    y, s = _validate(labels, scores)
    pos = s[y == 1.0]
    neg = s[y == 0.0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError(
            "AUC is undefined: both classes must be present")
    wins = 0.0
    ties = 0.0
    for p in pos:
        wins += float((p > neg).sum())
        ties += float((p == neg).sum())
    numerator = wins + 0.5 * ties
    return numerator / (float(pos.size) * float(neg.size))


def log_loss(labels, probs) -> LogLossResult:
    """Mean negative log-likelihood with probabilities clamped to
    [PROB_CLAMP, 1 - PROB_CLAMP]; reports how many entries were clamped."""
    y, p = _validate(labels, probs)
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    clamped = int(((p < lo) | (p > hi)).sum())
    q = np.clip(p, lo, hi)
    value = float(-(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)).mean())
    return LogLossResult(value, clamped)
