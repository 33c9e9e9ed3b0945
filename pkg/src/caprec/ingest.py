"""Rating / check-in file parsing and the preprocessing pipeline.

Supported raw formats:

``movielens-tab``
    ``user<TAB>item<TAB>rating[<TAB>timestamp]``; the timestamp is ignored.
``checkin-tsv``
    ``user<TAB>item[<TAB>1]`` plus a companion POI file ``item<TAB>lat<TAB>lon``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import RatingsDataset

_log = logging.getLogger(__name__)

FORMATS = ("movielens-tab", "checkin-tsv")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    value: float
    lat: Optional[float] = None
    lon: Optional[float] = None

    def __post_init__(self):
        if self.lat is not None and not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")
        if self.lon is not None and not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range")


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    train_fraction: float = 0.5
    negative_sampling: bool = False

    def __post_init__(self):
        if self.train_fraction != 0.5:
            raise ValueError("only a per-user half split is supported")


def _lines(path):
    # newline=None folds \r\n into \n
    with open(path, "r", encoding="utf-8", newline=None) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def parse_pois(path) -> dict[str, tuple[float, float]]:
    """Read ``item<TAB>lat<TAB>lon`` lines into ``{item_id: (lat, lon)}``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"POI coordinate file not found: {path}")
    pois = {}
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise IngestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            lat, lon = float(parts[1]), float(parts[2])
        except ValueError:
            raise IngestError(f"{path}:{lineno}: bad coordinate in {line!r}") from None
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise IngestError(f"{path}:{lineno}: coordinate ({lat}, {lon}) out of range")
        pois[parts[0]] = (lat, lon)
    return pois


def parse_interactions(path, format: str, poi_path=None) -> list[RawInteraction]:
    """Parse a raw interaction file.

    Ids are kept verbatim. Repeated (user, item) pairs keep the last
    occurrence; the number of dropped repeats is logged as a warning.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    pois = parse_pois(poi_path) if poi_path is not None else None

    latest: dict[tuple[str, str], RawInteraction] = {}
    duplicates = 0
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if format == "movielens-tab":
            if len(parts) not in (3, 4):
                raise IngestError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields")
            raw_value = parts[2]
        else:
            if len(parts) not in (2, 3):
                raise IngestError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
            raw_value = parts[2] if len(parts) == 3 else "1"
        try:
            value = float(raw_value)
        except ValueError:
            raise IngestError(f"{path}:{lineno}: bad rating value {raw_value!r}") from None
        if not math.isfinite(value):
            raise IngestError(f"{path}:{lineno}: non-finite rating value")
        user, item = parts[0], parts[1]
        lat = lon = None
        if pois is not None:
            if item not in pois:
                raise IngestError(f"{path}:{lineno}: item {item!r} has no coordinates in {poi_path}")
            lat, lon = pois[item]
        key = (user, item)
        if key in latest:
            duplicates += 1
            # re-insert so ordering follows the kept (last) occurrence
            del latest[key]
        latest[key] = RawInteraction(user, item, value, lat, lon)
    if duplicates:
        _log.warning("%s: %d duplicate (user, item) interactions, kept last", path, duplicates)
    return list(latest.values())


def to_dataset(interactions, feedback_mode: str = "raw-stars") -> RatingsDataset:
    """Densely re-index raw ids (in order of first appearance)."""
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users, items, values = [], [], []
    for it in interactions:
        users.append(user_index.setdefault(it.user_id, len(user_index)))
        items.append(item_index.setdefault(it.item_id, len(item_index)))
        values.append(it.value)
    return RatingsDataset(
        len(user_index),
        len(item_index),
        np.asarray(users, dtype=np.int64),
        np.asarray(items, dtype=np.int64),
        np.asarray(values, dtype=np.float64),
        feedback_mode=feedback_mode,
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
    ).sorted()


def _compact(data: RatingsDataset) -> RatingsDataset:
    """Drop users/items without entries and renumber the survivors."""
    keep_u = np.flatnonzero(data.user_counts() > 0)
    keep_i = np.flatnonzero(data.item_counts() > 0)
    umap = np.full(data.num_users, -1, dtype=np.int64)
    umap[keep_u] = np.arange(len(keep_u))
    imap = np.full(data.num_items, -1, dtype=np.int64)
    imap[keep_i] = np.arange(len(keep_i))
    user_ids = None if data.user_ids is None else tuple(data.user_ids[u] for u in keep_u)
    item_ids = None if data.item_ids is None else tuple(data.item_ids[i] for i in keep_i)
    return RatingsDataset(
        len(keep_u),
        len(keep_i),
        umap[data.users],
        imap[data.items],
        data.values,
        feedback_mode=data.feedback_mode,
        user_ids=user_ids,
        item_ids=item_ids,
    )


def filter_min_ratings(data: RatingsDataset, threshold: int = 10) -> RatingsDataset:
    """Remove users and items with ``<= threshold`` ratings, repeated to a fixed point."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    mask = np.ones(len(data), dtype=bool)
    while True:
        ucount = np.bincount(data.users[mask], minlength=data.num_users)
        icount = np.bincount(data.items[mask], minlength=data.num_items)
        new_mask = mask & (ucount[data.users] > threshold) & (icount[data.items] > threshold)
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if not mask.any():
        raise IngestError("empty dataset after filtering")
    return _compact(data.select(mask))


def polarize(data: RatingsDataset, mode: str) -> RatingsDataset:
    """Map raw values to training labels.

    ``explicit-threshold4``: stars >= 4 become +1, the rest -1.
    ``implicit01``: every observed entry becomes 1.
    """
    if mode == "explicit-threshold4":
        return data.with_values(np.where(data.values >= 4, 1.0, -1.0), "explicit±1")
    if mode == "implicit01":
        return data.with_values(np.ones(len(data)), "implicit01")
    raise ValueError(f"unknown polarization mode {mode!r}")


def _user_rng(seed: int, stream: int, user: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, user)))


def split_train_test(data: RatingsDataset, spec: SplitSpec) -> tuple[RatingsDataset, RatingsDataset]:
    """Per-user random half split; odd counts put the extra rating in train."""
    data = data.sorted()
    by_user = data.by_user
    counts = np.diff(by_user.indptr)
    short = np.flatnonzero(counts < 2)
    if len(short):
        raise IngestError(f"{len(short)} users have fewer than 2 ratings (e.g. user {short[0]})")
    in_train = np.zeros(len(data), dtype=bool)
    # data is sorted, so user i's entries are the slice indptr[i]:indptr[i+1]
    for i in range(data.num_users):
        lo, hi = by_user.indptr[i], by_user.indptr[i + 1]
        n = hi - lo
        perm = _user_rng(spec.seed, 0, i).permutation(n)
        in_train[lo + perm[: (n + 1) // 2]] = True
    return data.select(in_train), data.select(~in_train)


def sample_negatives(train: RatingsDataset, test: RatingsDataset, seed: int, *, stream: int = 1) -> RatingsDataset:
    """Add -1 labels to ``train``: one sampled negative per positive, per user.

    Negatives come uniformly without replacement from the items the user has
    no entry for in either ``train`` or ``test``. When that pool is too small
    all of it is taken and a warning is logged. Calling this with the roles
    swapped (and a different ``stream``) samples test negatives.
    """
    if train.feedback_mode != "implicit01":
        raise ValueError("negative sampling needs implicit01 feedback")
    seen_train = train.by_user
    seen_test = test.by_user
    users, items = [], []
    short_users = 0
    all_items = np.arange(train.num_items)
    for i in range(train.num_users):
        n_pos = int(np.count_nonzero(train.user_values(i) > 0))
        if n_pos == 0:
            continue
        seen = np.union1d(
            seen_train.indices[seen_train.indptr[i]:seen_train.indptr[i + 1]],
            seen_test.indices[seen_test.indptr[i]:seen_test.indptr[i + 1]],
        )
        pool = np.setdiff1d(all_items, seen, assume_unique=True)
        take = min(n_pos, len(pool))
        if take < n_pos:
            short_users += 1
        if take == 0:
            continue
        chosen = np.sort(_user_rng(seed, stream, i).choice(pool, size=take, replace=False))
        users.append(np.full(take, i, dtype=np.int64))
        items.append(chosen)
    if short_users:
        _log.warning("%d users had too few unrated items for full negative sampling", short_users)
    if not users:
        return train
    users = np.concatenate(users)
    items = np.concatenate(items)
    negatives = RatingsDataset(
        train.num_users, train.num_items, users, items, -np.ones(len(users)),
        feedback_mode=train.feedback_mode,
    )
    return train.concat(negatives).sorted()


def save_dataset(data: RatingsDataset, path) -> None:
    """Write index triples as ``user<TAB>item<TAB>value`` with a header comment."""
    data = data.sorted()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# num_users={data.num_users} num_items={data.num_items} feedback_mode={data.feedback_mode}\n")
        for u, i, v in zip(data.users.tolist(), data.items.tolist(), data.values.tolist()):
            f.write(f"{u}\t{i}\t{v!r}\n")


def load_dataset(path) -> RatingsDataset:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        if not header.startswith("#"):
            raise IngestError(f"{path}:1: missing dataset header")
        meta = dict(kv.split("=", 1) for kv in header[1:].split())
        rows = [line.split("\t") for line in f if line.strip()]
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    return RatingsDataset(
        int(meta["num_users"]),
        int(meta["num_items"]),
        arr[:, 0].astype(np.int64),
        arr[:, 1].astype(np.int64),
        arr[:, 2],
        feedback_mode=meta["feedback_mode"],
    )


def save_ids(ids, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for idx, raw in enumerate(ids):
            f.write(f"{idx}\t{raw}\n")


def load_ids(path) -> tuple[str, ...]:
    ids = []
    for lineno, line in _lines(path):
        idx, raw = line.split("\t", 1)
        if int(idx) != len(ids):
            raise IngestError(f"{path}:{lineno}: ids out of order")
        ids.append(raw)
    return tuple(ids)
