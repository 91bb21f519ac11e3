"""Test-set metrics on MAR data: MSE, AUC, NDCG@k.

Conventions: AUC counts score ties as half-wins; NDCG uses the binary
relevance itself as gain with a log2(rank + 1) discount, averages per-user
scores, and skips users whose test items are all negative.  Users with fewer
than k test items contribute their available items to both the DCG and the
ideal DCG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["MetricReport", "mse", "auc", "ndcg_at_k", "compute_metric_report"]


def mse(predictions, labels) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must share a shape")
    return float(np.mean((predictions - labels) ** 2))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [scores.size]])
    ranks_sorted = np.empty(scores.size, dtype=np.float64)
    for lo, hi in zip(starts, stops):
        ranks_sorted[lo:hi] = 0.5 * (lo + 1 + hi)  # mean of ranks lo+1 .. hi
    ranks = np.empty_like(ranks_sorted)
    ranks[order] = ranks_sorted
    return ranks


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = int((labels == 1.0).sum())
    n_neg = int((labels == 0.0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be binary")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[labels == 1.0].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def ndcg_at_k(scores_by_user, relevance_by_user, k: int) -> float:
    """Mean per-user NDCG at cutoff k; all-negative users are excluded.

    Ranking ties break by item position (stable sort on descending score).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    totals = []
    for scores, relevance in zip(scores_by_user, relevance_by_user):
        scores = np.asarray(scores, dtype=np.float64)
        relevance = np.asarray(relevance, dtype=np.float64)
        if scores.size != relevance.size:
            raise ValueError("per-user scores and relevance lengths differ")
        if relevance.sum() == 0:
            continue
        depth = min(k, scores.size)
        order = np.argsort(-scores, kind="mergesort")[:depth]
        discounts = 1.0 / np.log2(np.arange(2, depth + 2))
        dcg = float(np.dot(relevance[order], discounts))
        ideal = float(np.dot(np.sort(relevance)[::-1][:depth], discounts))
        totals.append(dcg / ideal)
    if not totals:
        raise ValueError("no user with a positive test item")
    return float(np.mean(totals))


@dataclass(frozen=True)
class MetricReport:
    mse: float
    auc: float
    ndcg_at: dict[int, float] = field(default_factory=dict)
    num_test_points: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError("auc out of [0, 1]")
        if self.mse < 0.0:
            raise ValueError("mse must be nonnegative")
        for k, v in self.ndcg_at.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"ndcg@{k} out of [0, 1]")

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "auc": self.auc,
            **{f"ndcg@{k}": v for k, v in sorted(self.ndcg_at.items())},
            "num_test_points": self.num_test_points,
        }


def compute_metric_report(
    scores, labels, users, ks: tuple[int, ...] = (5, 10)
) -> MetricReport:
    """Pointwise MSE/AUC plus per-user NDCG grouped by the user vector."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    users = np.asarray(users)
    order = np.argsort(users, kind="mergesort")
    sorted_users = users[order]
    boundaries = np.flatnonzero(np.diff(sorted_users) != 0) + 1
    groups = np.split(order, boundaries)
    per_user_scores = [scores[g] for g in groups]
    per_user_rel = [labels[g] for g in groups]
    return MetricReport(
        mse=mse(scores, labels),
        auc=auc(scores, labels),
        ndcg_at={k: ndcg_at_k(per_user_scores, per_user_rel, k) for k in ks},
        num_test_points=int(scores.size),
    )
