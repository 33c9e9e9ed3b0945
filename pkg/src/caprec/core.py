"""Shared numeric primitives and domain types."""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Literal, Optional, Sequence

import numpy as np
import scipy.sparse as sp

FeedbackMode = Literal["implicit01", "explicit±1", "raw-stars"]
SurrogateKind = Literal["logistic", "exponential", "hinge"]
AccuracyKind = Literal["square", "bpr"]

FEEDBACK_MODES = ("implicit01", "explicit±1", "raw-stars")
SURROGATES = ("logistic", "exponential", "hinge")
ACCURACY_KINDS = ("square", "bpr")


def sigmoid(x):
    """Logistic function ``1 / (1 + exp(-x))``.

    Only ever exponentiates ``-|x|``, so it is safe for arbitrarily large
    magnitudes. Accepts scalars or arrays; scalars come back as ``float``.
    """
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_with_slope(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``sigmoid(x)`` and ``sigmoid(x) * sigmoid(-x)`` from one shared exponential."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    d = 1.0 / (1.0 + e)
    ed = e * d
    return np.where(x >= 0, d, ed), ed * d


@dataclass(frozen=True, eq=False)
class RatingsDataset:
    """Sparse user-item ratings.

    Entries are stored as three parallel arrays. User-major and item-major
    indexes are built lazily, once, and cached.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    feedback_mode: str = "raw-stars"
    user_ids: Optional[Sequence[str]] = None
    item_ids: Optional[Sequence[str]] = None

    def __post_init__(self):
        users = np.ascontiguousarray(self.users, dtype=np.int64)
        items = np.ascontiguousarray(self.items, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if not (users.shape == items.shape == values.shape) or users.ndim != 1:
            raise ValueError("users, items and values must be 1-d arrays of equal length")
        if self.feedback_mode not in FEEDBACK_MODES:
            raise ValueError(f"unknown feedback mode {self.feedback_mode!r}")
        if len(users):
            if users.min() < 0 or users.max() >= self.num_users:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= self.num_items:
                raise ValueError("item index out of range")
            key = users * self.num_items + items
            if len(np.unique(key)) != len(key):
                raise ValueError("duplicate (user, item) pair")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def from_triples(cls, triples, num_users=None, num_items=None, **kwargs) -> "RatingsDataset":
        """Build from an iterable of ``(user, item, value)`` index triples."""
        arr = np.asarray(list(triples), dtype=np.float64).reshape(-1, 3)
        users = arr[:, 0].astype(np.int64)
        items = arr[:, 1].astype(np.int64)
        if num_users is None:
            num_users = int(users.max()) + 1 if len(users) else 0
        if num_items is None:
            num_items = int(items.max()) + 1 if len(items) else 0
        return cls(num_users, num_items, users, items, arr[:, 2], **kwargs)

    @cached_property
    def by_user(self) -> sp.csr_matrix:
        """User-major CSR matrix; row ``i`` holds ``L_i``."""
        m = sp.csr_matrix(
            (self.values, (self.users, self.items)), shape=(self.num_users, self.num_items)
        )
        m.sort_indices()
        return m

    @cached_property
    def by_item(self) -> sp.csc_matrix:
        """Item-major CSC matrix; column ``j`` holds ``Ra(j)``."""
        m = self.by_user.tocsc()
        m.sort_indices()
        return m

    def rated_items(self, i: int) -> np.ndarray:
        m = self.by_user
        return m.indices[m.indptr[i]:m.indptr[i + 1]]

    def user_values(self, i: int) -> np.ndarray:
        m = self.by_user
        return m.data[m.indptr[i]:m.indptr[i + 1]]

    def raters(self, j: int) -> np.ndarray:
        m = self.by_item
        return m.indices[m.indptr[j]:m.indptr[j + 1]]

    def positives(self, i: int) -> np.ndarray:
        return self.rated_items(i)[self.user_values(i) > 0]

    def negatives(self, i: int) -> np.ndarray:
        return self.rated_items(i)[self.user_values(i) < 0]

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    def select(self, mask: np.ndarray) -> "RatingsDataset":
        """Keep only the entries where ``mask`` is true (indices unchanged)."""
        return replace(
            self, users=self.users[mask], items=self.items[mask], values=self.values[mask]
        )

    def with_values(self, values: np.ndarray, feedback_mode: str) -> "RatingsDataset":
        return replace(self, values=values, feedback_mode=feedback_mode)

    def concat(self, other: "RatingsDataset") -> "RatingsDataset":
        """Entries of ``self`` followed by those of ``other`` (same index space)."""
        if (self.num_users, self.num_items) != (other.num_users, other.num_items):
            raise ValueError("datasets live in different index spaces")
        return replace(
            self,
            users=np.concatenate([self.users, other.users]),
            items=np.concatenate([self.items, other.items]),
            values=np.concatenate([self.values, other.values]),
        )

    def sorted(self) -> "RatingsDataset":
        """Entries ordered by (user, item)."""
        order = np.lexsort((self.items, self.users))
        return self.select(order)


@dataclass(eq=False)
class LatentModel:
    """Latent factors, stored column-per-entity.

    ``U`` is k x M, ``V`` is k x N. The geographical variant adds a learned
    user activity matrix ``X`` (L' x M) and a fixed POI influence matrix ``Y``
    (L' x N, dense or scipy sparse).
    """

    U: np.ndarray
    V: np.ndarray
    X: Optional[np.ndarray] = None
    Y: Optional[object] = None

    def __post_init__(self):
        if self.U.shape[0] != self.V.shape[0]:
            raise ValueError("U and V must share the rank dimension")
        if (self.X is None) != (self.Y is None):
            raise ValueError("X present iff Y present")
        if self.X is not None:
            if self.X.shape[0] != self.Y.shape[0]:
                raise ValueError("X and Y must share the grid dimension")
            if self.X.shape[1] != self.U.shape[1] or self.Y.shape[1] != self.V.shape[1]:
                raise ValueError("X/Y column counts must match U/V")

    @property
    def rank(self) -> int:
        return self.U.shape[0]

    @property
    def num_users(self) -> int:
        return self.U.shape[1]

    @property
    def num_items(self) -> int:
        return self.V.shape[1]

    @property
    def is_geo(self) -> bool:
        return self.X is not None

    @property
    def geo_dim(self) -> int:
        return self.X.shape[0] if self.X is not None else 0

    def scores(self) -> np.ndarray:
        """Full M x N matrix of predicted ratings."""
        r = self.U.T @ self.V
        if self.X is not None:
            r = r + geo_scores(self.X, self.Y)
        return r

    def copy(self) -> "LatentModel":
        return LatentModel(
            self.U.copy(),
            self.V.copy(),
            None if self.X is None else self.X.copy(),
            self.Y,
        )


def geo_scores(X: np.ndarray, Y) -> np.ndarray:
    """``X^T Y`` for dense or sparse ``Y``."""
    if sp.issparse(Y):
        return np.asarray((Y.T @ X).T)
    return X.T @ Y


def predict_rating(model: LatentModel, i: int, j: int) -> float:
    if not (0 <= i < model.num_users) or not (0 <= j < model.num_items):
        raise IndexError(f"(user {i}, item {j}) out of range")
    r = float(model.U[:, i] @ model.V[:, j])
    if model.is_geo:
        y = model.Y[:, [j]]
        y = y.toarray().ravel() if sp.issparse(y) else np.asarray(y).ravel()
        r += float(model.X[:, i] @ y)
    return r


@dataclass(frozen=True, eq=False)
class ContextVectors:
    """User propensities ``p`` (length M) and item capacities ``c`` (length N)."""

    p: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        if p.ndim != 1 or c.ndim != 1:
            raise ValueError("propensities and capacities must be vectors")
        if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
            raise ValueError("propensities must lie in [0, 1]")
        if np.any(~np.isfinite(c)) or np.any(c <= 0):
            raise ValueError("capacities must be strictly positive")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "c", c)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.2
    lam: float = 1e-5
    rank: int = 10
    surrogate: str = "logistic"
    accuracy: str = "square"
    geo: bool = False
    max_iters: int = 3000
    tol: float = 1e-5
    seed: int = 0
    adagrad_epsilon: float = 1e-8
    init_scale: float = 0.1
    # exponential surrogate only; per-column gradient norm
    clip_norm: float = 1e3
    # None keeps the full pair sum
    bpr_max_pairs_per_user: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.surrogate!r}")
        if self.accuracy not in ACCURACY_KINDS:
            raise ValueError(f"unknown accuracy objective {self.accuracy!r}")
        if self.adagrad_epsilon <= 0:
            raise ValueError("adagrad_epsilon must be positive")
