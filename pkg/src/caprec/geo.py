"""Web-Mercator tiling of POIs and the Gaussian-kernel influence matrix."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

MIN_LATITUDE = -85.05112878
MAX_LATITUDE = 85.05112878
DEFAULT_LEVEL = 15
KERNEL_CUTOFF = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TileCoord(NamedTuple):
    tile_x: int
    tile_y: int
    level: int = DEFAULT_LEVEL


def latlon_to_tile(lat: float, lon: float, level: int = DEFAULT_LEVEL) -> TileCoord:
    """Tile containing ``(lat, lon)`` at the given level of detail.

    Latitude is clipped to the Mercator domain (about +-85.05 degrees).
    """
    if math.isnan(lat) or math.isnan(lon):
        raise ValueError("NaN coordinate")
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} out of range")
    lat = min(max(lat, MIN_LATITUDE), MAX_LATITUDE)
    n = 1 << level
    x = (lon + 180.0) / 360.0
    s = math.sin(math.radians(lat))
    y = 0.5 - math.log((1.0 + s) / (1.0 - s)) / (4.0 * math.pi)
    tx = min(max(int(math.floor(x * n)), 0), n - 1)
    ty = min(max(int(math.floor(y * n)), 0), n - 1)
    return TileCoord(tx, ty, level)


def gaussian_kernel(d, bandwidth: float = 1.0):
    """``K(d / h) / h`` with ``K`` the standard normal density."""
    z = np.asarray(d, dtype=np.float64) / bandwidth
    out = np.exp(-0.5 * z * z) * (_INV_SQRT_2PI / bandwidth)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class InfluenceMatrix:
    """Sparse L' x N influence matrix over the occupied tiles.

    Row ``l`` corresponds to ``tiles[l]`` (tiles sorted by (x, y)).
    """

    Y: sp.csr_matrix
    tiles: np.ndarray  # (L', 2) int64
    bandwidth: float

    @property
    def geo_dim(self) -> int:
        return self.Y.shape[0]

    def tile_row(self, tile) -> int:
        hit = np.flatnonzero((self.tiles[:, 0] == tile[0]) & (self.tiles[:, 1] == tile[1]))
        if not len(hit):
            raise KeyError(f"tile {tuple(tile)} is not occupied")
        return int(hit[0])


def build_influence_matrix(pois, bandwidth: float = 1.0, chunk: int = 256) -> InfluenceMatrix:
    """Kernel-density influence of every POI on every occupied tile.

    ``pois`` is a sequence of ``(item_index, TileCoord)`` covering item
    indices ``0..N-1``. Distances are Euclidean in tile units between tile
    centers; values under ``KERNEL_CUTOFF`` are dropped.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    pois = list(pois)
    if not pois:
        raise ValueError("empty POI list")
    n_items = len(pois)
    item_tiles = np.empty((n_items, 2), dtype=np.int64)
    seen = np.zeros(n_items, dtype=bool)
    for j, tile in pois:
        if not 0 <= j < n_items or seen[j]:
            raise ValueError("POI item indices must cover 0..N-1 exactly once")
        seen[j] = True
        item_tiles[j] = (tile[0], tile[1])
    tiles = np.unique(item_tiles, axis=0)

    rows, cols, vals = [], [], []
    for start in range(0, n_items, chunk):
        block = item_tiles[start:start + chunk]
        diff = tiles[:, None, :] - block[None, :, :]
        d = np.sqrt((diff.astype(np.float64) ** 2).sum(axis=2))
        y = gaussian_kernel(d, bandwidth)
        r, c = np.nonzero(y >= KERNEL_CUTOFF)
        rows.append(r)
        cols.append(c + start)
        vals.append(y[r, c])
    Y = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(tiles), n_items),
    )
    Y.sort_indices()
    return InfluenceMatrix(Y, tiles, float(bandwidth))


def influence_from_coordinates(item_ids, coords: dict, bandwidth: float = 1.0,
                               level: int = DEFAULT_LEVEL) -> InfluenceMatrix:
    """Tile and smooth the POIs named by ``item_ids`` (dataset order)."""
    missing = [i for i in item_ids if i not in coords]
    if missing:
        raise KeyError(f"{len(missing)} items have no coordinates (e.g. {missing[0]!r})")
    pois = [(j, latlon_to_tile(*coords[iid], level=level)) for j, iid in enumerate(item_ids)]
    return build_influence_matrix(pois, bandwidth)


def save_influence(inf: InfluenceMatrix, path) -> None:
    """Sparse triplets ``row,col,value``; a header comment records shape and bandwidth."""
    Y = inf.Y.tocoo()
    order = np.lexsort((Y.col, Y.row))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# rows={Y.shape[0]} cols={Y.shape[1]} bandwidth={inf.bandwidth!r}\n")
        f.write("row,col,value\n")
        for r, c, v in zip(Y.row[order].tolist(), Y.col[order].tolist(), Y.data[order].tolist()):
            f.write(f"{r},{c},{v!r}\n")


def save_tiles(inf: InfluenceMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("row,tile_x,tile_y\n")
        for r, (x, y) in enumerate(inf.tiles.tolist()):
            f.write(f"{r},{x},{y}\n")


def load_influence(path, tiles_path=None) -> InfluenceMatrix:
    with open(path, "r", encoding="utf-8") as f:
        meta = dict(kv.split("=", 1) for kv in f.readline()[1:].split())
        if f.readline().strip() != "row,col,value":
            raise ValueError(f"{path}: bad header")
        trip = [line.strip().split(",") for line in f if line.strip()]
    shape = (int(meta["rows"]), int(meta["cols"]))
    r = np.asarray([int(t[0]) for t in trip], dtype=np.int64)
    c = np.asarray([int(t[1]) for t in trip], dtype=np.int64)
    v = np.asarray([float(t[2]) for t in trip], dtype=np.float64)
    Y = sp.csr_matrix((v, (r, c)), shape=shape)
    Y.sort_indices()
    tiles = np.zeros((shape[0], 2), dtype=np.int64)
    if tiles_path is not None:
        with open(tiles_path, "r", encoding="utf-8") as f:
            f.readline()
            for line in f:
                if line.strip():
                    row, x, y = (int(t) for t in line.split(","))
                    tiles[row] = (x, y)
    return InfluenceMatrix(Y, tiles, float(meta["bandwidth"]))
