"""Synthetic implicit-feedback data with planted low-rank structure.

Used by the test suite and the CLI demo in place of the real MovieLens /
Foursquare / Gowalla downloads; files are written in the same formats.
"""
from __future__ import annotations

import numpy as np

from .core import RatingsDataset, sigmoid


def planted_implicit(num_users: int = 200, num_items: int = 300, rank: int = 5,
                     density: float = 0.08, popularity_skew: float = 1.0, seed: int = 0):
    """Sample check-ins from ``sigmoid(U^T V + b_item + offset)``.

    ``b_item`` is a Gaussian popularity bias (scale ``popularity_skew``), so
    item usage is heavy-tailed like real data. The offset is bisected so the
    expected density matches ``density``. Every user gets at least 4 and every
    item at least 1 interaction.
    """
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, 1.0, size=(rank, num_users))
    V = rng.normal(0.0, 1.0, size=(rank, num_items))
    bias = rng.normal(0.0, popularity_skew, size=num_items)
    logits = U.T @ V / np.sqrt(rank) * 2.0 + bias[None, :]
    lo, hi = -30.0, 30.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if sigmoid(logits + mid).mean() > density:
            hi = mid
        else:
            lo = mid
    prob = sigmoid(logits + 0.5 * (lo + hi))
    hit = rng.random(prob.shape) < prob
    # top up sparse users with their most likely items, and empty items with their best user
    for i in range(num_users):
        if hit[i].sum() < 4:
            hit[i, np.argsort(-prob[i], kind="stable")[:4]] = True
    for j in np.flatnonzero(~hit.any(axis=0)):
        hit[np.argmax(prob[:, j]), j] = True
    users, items = np.nonzero(hit)
    return RatingsDataset(
        num_users, num_items, users, items, np.ones(len(users)),
        feedback_mode="implicit01",
        user_ids=tuple(f"u{i}" for i in range(num_users)),
        item_ids=tuple(f"i{j}" for j in range(num_items)),
    )


def synthetic_coordinates(num_items: int, num_clusters: int = 6, spread_deg: float = 0.03,
                          seed: int = 0) -> dict:
    """POI coordinates clustered around a few city centres, keyed ``i<j>``."""
    rng = np.random.default_rng(seed + 7)
    centres = np.column_stack([rng.uniform(-50, 60, num_clusters), rng.uniform(-120, 140, num_clusters)])
    which = rng.integers(0, num_clusters, size=num_items)
    pts = centres[which] + rng.normal(0.0, spread_deg, size=(num_items, 2))
    pts[:, 0] = np.clip(pts[:, 0], -85.0, 85.0)
    return {f"i{j}": (float(pts[j, 0]), float(pts[j, 1])) for j in range(num_items)}


def write_movielens(data: RatingsDataset, path, stars_seed: int = 0) -> None:
    """``user<TAB>item<TAB>stars<TAB>timestamp``; implicit entries get random 1-5 stars."""
    rng = np.random.default_rng(stars_seed)
    stars = data.values if data.feedback_mode == "raw-stars" else rng.integers(1, 6, size=len(data))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for n, (u, i, s) in enumerate(zip(data.users.tolist(), data.items.tolist(), np.asarray(stars).tolist())):
            f.write(f"{data.user_ids[u]}\t{data.item_ids[i]}\t{int(s)}\t{881250949 + n}\n")


def write_checkins(data: RatingsDataset, path, coords: dict = None, poi_path=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for u, i in zip(data.users.tolist(), data.items.tolist()):
            f.write(f"{data.user_ids[u]}\t{data.item_ids[i]}\t1\n")
    if coords is not None and poi_path is not None:
        with open(poi_path, "w", encoding="utf-8", newline="\n") as f:
            for iid in data.item_ids:
                lat, lon = coords[iid]
                f.write(f"{iid}\t{lat!r}\t{lon!r}\n")
