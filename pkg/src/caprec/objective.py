"""Expected usage, capacity surrogates and the full training objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import SURROGATES, ContextVectors, LatentModel, RatingsDataset, TrainConfig, sigmoid

_log = logging.getLogger(__name__)

# exp(-delta) is reported as +inf below this instead of overflowing
EXP_OVERFLOW_DELTA = -700.0


@dataclass(frozen=True)
class ObjectiveBreakdown:
    accuracy_term: float
    capacity_term: float
    regularization_term: float
    total: float
    alpha: float


def expected_usage(model: LatentModel, p: np.ndarray, j: Optional[int] = None, scores=None):
    """Propensity-weighted sum of ``sigmoid(r_hat)`` over users.

    Returns the value for item ``j``, or the length-N vector when ``j`` is None.
    """
    if scores is None:
        scores = model.scores()
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (scores.shape[0],):
        raise ValueError("propensity vector does not match the number of users")
    if j is not None:
        return float(p @ sigmoid(scores[:, j]))
    return p @ sigmoid(scores)


def surrogate_loss(kind: str, delta):
    """Penalty on ``delta = capacity - expected usage``; large when delta < 0."""
    d = np.asarray(delta, dtype=np.float64)
    if kind == "logistic":
        out = np.maximum(0.0, -d) + np.log1p(np.exp(-np.abs(d)))
    elif kind == "exponential":
        out = np.where(d < EXP_OVERFLOW_DELTA, np.inf, np.exp(-np.maximum(d, EXP_OVERFLOW_DELTA)))
    elif kind == "hinge":
        out = np.maximum(-d, 0.0)
    else:
        raise ValueError(f"unknown surrogate {kind!r}; expected one of {SURROGATES}")
    return float(out) if out.ndim == 0 else out


def surrogate_derivative(kind: str, delta):
    """d(loss)/d(delta). The hinge kink at 0 takes the zero subgradient."""
    d = np.asarray(delta, dtype=np.float64)
    if kind == "logistic":
        out = -sigmoid(-d)
    elif kind == "exponential":
        out = np.where(d < EXP_OVERFLOW_DELTA, -np.inf, -np.exp(-np.maximum(d, EXP_OVERFLOW_DELTA)))
    elif kind == "hinge":
        out = np.where(d < 0, -1.0, 0.0)
    else:
        raise ValueError(f"unknown surrogate {kind!r}; expected one of {SURROGATES}")
    return float(out) if np.ndim(out) == 0 else out


def capacity_term(model: LatentModel, ctx: ContextVectors, kind: str = "logistic", scores=None) -> float:
    """Mean surrogate loss of ``c_j - E[usage(j)]`` over items."""
    usage = expected_usage(model, ctx.p, scores=scores)
    if ctx.c.shape != usage.shape:
        raise ValueError("capacity vector does not match the number of items")
    return float(np.mean(surrogate_loss(kind, ctx.c - usage)))


def bpr_pairs(train: RatingsDataset, max_pairs_per_user: Optional[int] = None, seed: int = 0):
    """All (user, positive item, negative item) triples, user-major.

    With ``max_pairs_per_user`` set, users with more pairs keep a seeded
    uniform subsample of that size.
    """
    users, pos, neg = [], [], []
    lonely = 0
    for i in range(train.num_users):
        P = train.positives(i)
        Q = train.negatives(i)
        if len(P) == 0 or len(Q) == 0:
            if len(P) or len(Q):
                lonely += 1
            continue
        pp, qq = np.meshgrid(P, Q, indexing="ij")
        pp, qq = pp.ravel(), qq.ravel()
        if max_pairs_per_user is not None and len(pp) > max_pairs_per_user:
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3, i)))
            keep = np.sort(rng.choice(len(pp), size=max_pairs_per_user, replace=False))
            pp, qq = pp[keep], qq[keep]
        users.append(np.full(len(pp), i, dtype=np.int64))
        pos.append(pp)
        neg.append(qq)
    if lonely:
        _log.warning("%d users lack positives or negatives and add nothing to the BPR term", lonely)
    if not users:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    return np.concatenate(users), np.concatenate(pos), np.concatenate(neg)


def accuracy_term(model: LatentModel, train: RatingsDataset, kind: str = "square",
                  scores=None, pairs=None) -> float:
    """Squared error over observed entries, or the BPR pairwise log-loss."""
    if scores is None:
        scores = model.scores()
    if kind == "square":
        resid = train.values - scores[train.users, train.items]
        return float(np.sum(resid * resid))
    if kind == "bpr":
        if pairs is None:
            pairs = bpr_pairs(train)
        u, k, j = pairs
        diff = scores[u, k] - scores[u, j]
        return float(np.sum(np.logaddexp(0.0, -diff)))
    raise ValueError(f"unknown accuracy objective {kind!r}")


def regularization(model: LatentModel) -> float:
    """Sum of squared Frobenius norms of the learned factors (``Y`` excluded)."""
    r = float(np.sum(model.U * model.U)) + float(np.sum(model.V * model.V))
    if model.X is not None:
        r += float(np.sum(model.X * model.X))
    return r


def objective_value(model: LatentModel, train: RatingsDataset, ctx: Optional[ContextVectors],
                    cfg: TrainConfig, *, scores=None, pairs=None) -> ObjectiveBreakdown:
    """``(1 - alpha) * accuracy + alpha * capacity + lambda * ||factors||^2``.

    At ``alpha == 0`` the capacity term is never evaluated (``ctx`` may be
    None) and is reported as 0. At ``alpha == 1`` the accuracy term is still
    reported but does not enter the total.
    """
    if cfg.geo != model.is_geo:
        raise ValueError("config geo flag does not match the model")
    alpha = cfg.alpha
    if scores is None:
        scores = model.scores()
    acc = accuracy_term(model, train, cfg.accuracy, scores=scores, pairs=pairs)
    if alpha == 0.0:
        cap = 0.0
    else:
        if ctx is None:
            raise ValueError("capacity context required when alpha > 0")
        cap = capacity_term(model, ctx, cfg.surrogate, scores=scores)
    reg = cfg.lam * regularization(model)
    if alpha == 0.0:
        total = acc + reg
    elif alpha == 1.0:
        total = cap + reg
    else:
        total = (1.0 - alpha) * acc + alpha * cap + reg
    return ObjectiveBreakdown(acc, cap, reg, total, alpha)
