"""Test-set metrics, top-N ranking and the post-processing capacity baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ContextVectors, LatentModel, RatingsDataset
from .objective import capacity_term


class MetricError(ValueError):
    pass


@dataclass
class RankedList:
    """Per-user item lists, best first."""

    lists: list

    def __len__(self):
        return len(self.lists)

    def __getitem__(self, i) -> np.ndarray:
        return self.lists[i]

    def top(self, k: int) -> "RankedList":
        return RankedList([items[:k] for items in self.lists])


@dataclass
class MetricsReport:
    rmse: float = math.nan
    pairwise01: float = math.nan
    capacity_loss: float = math.nan
    overall: float = math.nan
    map_at: dict = field(default_factory=dict)
    wap_at: dict = field(default_factory=dict)
    wmcv_at: dict = field(default_factory=dict)
    ap_excluded: int = 0

    def as_row(self, tops: Sequence[int]) -> dict:
        row = {
            "rmse": self.rmse,
            "pairwise01": self.pairwise01,
            "capacity_loss": self.capacity_loss,
            "overall": self.overall,
        }
        for k in tops:
            row[f"map@{k}"] = self.map_at.get(k, math.nan)
            row[f"wap@{k}"] = self.wap_at.get(k, math.nan)
            row[f"wmcv@{k}"] = self.wmcv_at.get(k, math.nan)
        row["ap_excluded"] = self.ap_excluded
        return row


def _order_desc(scores: np.ndarray, items: np.ndarray) -> np.ndarray:
    """``items`` sorted by score descending, ties by ascending item index."""
    return items[np.lexsort((items, -scores))]


def rmse(model: Optional[LatentModel], test: RatingsDataset, scores=None) -> float:
    """Root of the user-averaged per-user mean squared error."""
    if len(test) == 0:
        raise MetricError("empty test set")
    if scores is None:
        scores = model.scores()
    err = scores[test.users, test.items] - test.values
    sse = np.bincount(test.users, weights=err * err, minlength=test.num_users)
    cnt = np.bincount(test.users, minlength=test.num_users)
    has = cnt > 0
    return float(np.sqrt(np.mean(sse[has] / cnt[has])))


def pairwise01_loss(model: Optional[LatentModel], test: RatingsDataset, scores=None) -> float:
    """Fraction of (negative, positive) test pairs with the negative scored >= the positive.

    Averaged per user, over users with both positive and negative test items.
    """
    if scores is None:
        scores = model.scores()
    per_user = []
    for i in range(test.num_users):
        pos = test.positives(i)
        neg = test.negatives(i)
        if len(pos) == 0 or len(neg) == 0:
            continue
        sp_ = np.sort(scores[i, pos])
        sn = scores[i, neg]
        # positives with score <= each negative's score
        wrong = np.searchsorted(sp_, sn, side="right").sum()
        per_user.append(wrong / (len(pos) * len(neg)))
    if not per_user:
        raise MetricError("no user has both positive and negative test items")
    return float(np.mean(per_user))


def capacity_loss_metric(model: LatentModel, ctx: ContextVectors, surrogate: str = "logistic", scores=None) -> float:
    return capacity_term(model, ctx, surrogate, scores=scores)


def overall_metric(report: MetricsReport, alpha: float, kind: str = "square") -> float:
    """``(1 - alpha) * RMSE^2 + alpha * capacity`` (square) or with the 0/1 pairwise loss (bpr)."""
    if kind == "square":
        first = report.rmse ** 2
    elif kind == "bpr":
        first = report.pairwise01
    else:
        raise ValueError(f"unknown accuracy objective {kind!r}")
    return (1.0 - alpha) * first + alpha * report.capacity_loss


def candidate_mask(test: RatingsDataset) -> np.ndarray:
    mask = np.zeros((test.num_users, test.num_items), dtype=bool)
    mask[test.users, test.items] = True
    return mask


def rank_items(scores: np.ndarray, candidates: Optional[np.ndarray] = None) -> RankedList:
    """Rank each user's candidate items (a boolean M x N mask; all items if None)."""
    n_users, n_items = scores.shape
    all_items = np.arange(n_items)
    lists = []
    for i in range(n_users):
        items = all_items if candidates is None else np.flatnonzero(candidates[i])
        lists.append(_order_desc(scores[i, items], items))
    return RankedList(lists)


def _relevant_sets(test: RatingsDataset) -> list:
    return [set(test.positives(i).tolist()) for i in range(test.num_users)]


def average_precision_at_k(ranked_items, relevant: set, k: int) -> float:
    """AP@k = sum_r P@r * rel(r) / min(k, #relevant); NaN when nothing is relevant."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return math.nan
    hits = 0
    total = 0.0
    for r, item in enumerate(list(ranked_items)[:k], 1):
        if item in relevant:
            hits += 1
            total += hits / r
    return total / min(k, len(relevant))


def per_user_ap(ranked: RankedList, test: RatingsDataset, k: int) -> np.ndarray:
    rel = _relevant_sets(test)
    return np.array([average_precision_at_k(ranked[i], rel[i], k) for i in range(len(ranked))])


def map_at_k(ranked: RankedList, test: RatingsDataset, k: int) -> float:
    """Mean AP@k over users with at least one relevant test item."""
    ap = per_user_ap(ranked, test, k)
    ok = ~np.isnan(ap)
    if not ok.any():
        raise MetricError("no user has a relevant test item")
    return float(np.mean(ap[ok]))


def wap_at_k(ranked: RankedList, test: RatingsDataset, p: np.ndarray, k: int) -> float:
    """Propensity-weighted mean AP@k over users with a relevant test item."""
    ap = per_user_ap(ranked, test, k)
    ok = ~np.isnan(ap)
    if not ok.any():
        raise MetricError("no user has a relevant test item")
    w = np.asarray(p, dtype=np.float64)[ok]
    if w.sum() == 0:
        raise MetricError("propensities of eligible users sum to zero")
    return float(np.sum(w * ap[ok]) / np.sum(w))


def recommendation_load(ranked: RankedList, p: np.ndarray, num_items: int, k: int) -> np.ndarray:
    """For each item, the summed propensity of users who got it in their top k."""
    load = np.zeros(num_items)
    for i, items in enumerate(ranked.lists):
        load[np.asarray(items[:k], dtype=np.int64)] += p[i]
    return load


def wmcv_at_k(ranked: RankedList, ctx: ContextVectors, k: int) -> float:
    """Fraction of items whose top-k propensity load reaches capacity."""
    load = recommendation_load(ranked, ctx.p, len(ctx.c), k)
    return float(np.mean(load >= ctx.c))


def post_process_baseline(scores: np.ndarray, ctx: ContextVectors, k: int,
                          candidates: Optional[np.ndarray] = None) -> RankedList:
    """Capacity-respecting top-k lists from an unconstrained score matrix.

    Each item goes only to its ``floor(c_j)`` best-scoring users (among users
    for whom it is a candidate; ties favour the lower user index). Each user
    then gets their allowed items ranked by score, cut to ``k``.
    """
    n_users, n_items = scores.shape
    if candidates is None:
        candidates = np.ones((n_users, n_items), dtype=bool)
    allowed = np.zeros((n_users, n_items), dtype=bool)
    quota = np.floor(ctx.c).astype(np.int64)
    for j in range(n_items):
        users = np.flatnonzero(candidates[:, j])
        if quota[j] <= 0 or len(users) == 0:
            continue
        best = _order_desc(scores[users, j], users)[: quota[j]]
        allowed[best, j] = True
    return rank_items(scores, allowed).top(k)


def evaluate(model: LatentModel, test: RatingsDataset, ctx: ContextVectors, alpha: float,
             kind: str = "square", tops: Sequence[int] = (1, 5, 10), surrogate: str = "logistic",
             test_negatives: Optional[RatingsDataset] = None,
             ranked: Optional[RankedList] = None) -> MetricsReport:
    """Every metric on the test split; undefined metrics come back as NaN.

    RMSE uses the observed test entries only. Sampled ``test_negatives``
    (implicit data) join the pairwise loss and the top-k candidate sets.
    """
    scores = model.scores()
    labelled = test if test_negatives is None else test.concat(test_negatives).sorted()
    report = MetricsReport()
    try:
        report.rmse = rmse(None, test, scores)
    except MetricError:
        pass
    try:
        report.pairwise01 = pairwise01_loss(None, labelled, scores)
    except MetricError:
        pass
    report.capacity_loss = capacity_loss_metric(model, ctx, surrogate, scores)
    report.overall = overall_metric(report, alpha, kind)
    if ranked is None:
        ranked = rank_items(scores, candidate_mask(labelled))
    rel = _relevant_sets(labelled)
    report.ap_excluded = sum(1 for r in rel if not r)
    for k in tops:
        try:
            report.map_at[k] = map_at_k(ranked, labelled, k)
            report.wap_at[k] = wap_at_k(ranked, labelled, ctx.p, k)
        except MetricError:
            report.map_at[k] = report.wap_at[k] = math.nan
        report.wmcv_at[k] = wmcv_at_k(ranked, ctx, k)
    return report
