"""Capacity and propensity vectors synthesized from training usage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContextVectors, RatingsDataset

CAPACITY_KINDS = ("actual", "binning", "uniform", "linear_max", "linear_mean", "reverse_binning")
PROPENSITY_KINDS = ("actual", "median", "linear")

# every capacity is floored here so c_j > 0 holds for all kinds
CAPACITY_FLOOR = 1e-6
MEDIAN_HIGH, MEDIAN_LOW = 0.45, 0.01
LINEAR_PROPENSITY_MAX = 0.6


@dataclass(frozen=True)
class CapacityKind:
    name: str
    k: float = 10.0

    def __post_init__(self):
        if self.name not in CAPACITY_KINDS:
            raise ValueError(f"unknown capacity kind {self.name!r}")
        if self.name == "uniform" and not self.k > 0:
            raise ValueError("uniform capacity must be positive")

    @classmethod
    def parse(cls, text: str) -> "CapacityKind":
        """Accept ``uniform(10)``, ``uniform-10``, ``uniform:10`` or a bare kind name."""
        text = text.strip().replace("-", "_")
        if text.startswith("uniform"):
            arg = text[len("uniform"):].strip("():_ ")
            return cls("uniform", float(arg) if arg else 10.0)
        return cls(text)

    def __str__(self) -> str:
        return f"uniform({self.k:g})" if self.name == "uniform" else self.name


def _rank_positions(values: np.ndarray) -> np.ndarray:
    """Position of each entry in ascending order, ties broken by index."""
    order = np.lexsort((np.arange(len(values)), values))
    pos = np.empty(len(values), dtype=np.int64)
    pos[order] = np.arange(len(values))
    return pos


def _linear_spread(values: np.ndarray, top: float) -> np.ndarray:
    n = len(values)
    if n == 1:
        return np.array([top], dtype=np.float64)
    return _rank_positions(values) / (n - 1) * top


def _bins(actual: np.ndarray, low: float, mid: float, high: float) -> np.ndarray:
    return np.where(actual <= 20, low, np.where(actual <= 100, mid, high)).astype(np.float64)


def make_capacities(train: RatingsDataset, kind) -> np.ndarray:
    """Item capacities derived from the number of training raters per item."""
    if isinstance(kind, str):
        kind = CapacityKind.parse(kind)
    if len(train) == 0:
        raise ValueError("cannot derive capacities from an empty training set")
    actual = train.item_counts().astype(np.float64)
    if kind.name == "actual":
        c = actual
    elif kind.name == "binning":
        c = _bins(actual, 5.0, 50.0, 150.0)
    elif kind.name == "reverse_binning":
        c = _bins(actual, 150.0, 50.0, 5.0)
    elif kind.name == "uniform":
        c = np.full(train.num_items, float(kind.k))
    elif kind.name == "linear_max":
        c = _linear_spread(actual, actual.max())
    else:
        c = _linear_spread(actual, 2.0 * actual.mean())
    return np.maximum(c, CAPACITY_FLOOR)


def make_propensities(train: RatingsDataset, kind: str) -> np.ndarray:
    """User propensities derived from the number of training ratings per user."""
    if kind not in PROPENSITY_KINDS:
        raise ValueError(f"unknown propensity kind {kind!r}")
    if len(train) == 0:
        raise ValueError("cannot derive propensities from an empty training set")
    actual = train.user_counts() / train.num_items
    if kind == "actual":
        return actual
    if kind == "median":
        return np.where(actual >= np.median(actual), MEDIAN_HIGH, MEDIAN_LOW)
    return _linear_spread(actual, LINEAR_PROPENSITY_MAX)


def make_context(train: RatingsDataset, capacity_kind="actual", propensity_kind="actual") -> ContextVectors:
    return ContextVectors(make_propensities(train, propensity_kind), make_capacities(train, capacity_kind))


def save_vector(vec: np.ndarray, path) -> None:
    """CSV ``index,value`` with full float precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("index,value\n")
        for idx, v in enumerate(np.asarray(vec, dtype=np.float64).tolist()):
            f.write(f"{idx},{v!r}\n")


def load_vector(path, length=None) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "index,value":
            raise ValueError(f"{path}: expected header 'index,value', got {header!r}")
        pairs = [line.strip().split(",") for line in f if line.strip()]
    idx = np.asarray([int(p[0]) for p in pairs], dtype=np.int64)
    vals = np.asarray([float(p[1]) for p in pairs], dtype=np.float64)
    n = length if length is not None else (int(idx.max()) + 1 if len(idx) else 0)
    if len(idx) != n or not np.array_equal(np.sort(idx), np.arange(n)):
        raise ValueError(f"{path}: indices must cover 0..{n - 1} exactly once")
    out = np.empty(n, dtype=np.float64)
    out[idx] = vals
    return out
