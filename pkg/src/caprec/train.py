"""Alternating-minimization training with per-coordinate Adagrad steps.

Every gradient is assembled from the derivative of the objective with
respect to the score matrix ``R_hat``:

* accuracy part: sparse M x N, non-zero on observed entries only;
* capacity part: dense M x N,
  ``G_ij = (1/N) * w_j * p_i * s(r_ij) * s(-r_ij)`` with ``w_j = -l'(delta_j)``.

Chain rule through ``R_hat = U^T V + X^T Y`` then gives
``dU = V W^T``, ``dV = U W`` and ``dX = Y W^T``.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .core import ContextVectors, LatentModel, RatingsDataset, TrainConfig, sigmoid, sigmoid_with_slope
from .objective import ObjectiveBreakdown, bpr_pairs, objective_value, surrogate_derivative

_log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _dense(a) -> np.ndarray:
    return a.toarray() if sp.issparse(a) else np.asarray(a)


def capacity_score_grad(scores: np.ndarray, ctx: ContextVectors, surrogate: str = "logistic") -> np.ndarray:
    """d(capacity term)/d(R_hat), dense M x N."""
    s_pos, slope = sigmoid_with_slope(scores)
    usage = ctx.p @ s_pos
    w = -surrogate_derivative(surrogate, ctx.c - usage)
    n_items = scores.shape[1]
    slope *= ctx.p[:, None]
    slope *= (w / n_items)[None, :]
    return slope


def accuracy_score_grad(scores: np.ndarray, train: RatingsDataset, kind: str = "square",
                        pairs=None) -> sp.csr_matrix:
    """d(accuracy term)/d(R_hat), sparse M x N."""
    shape = scores.shape
    if kind == "square":
        resid = train.values - scores[train.users, train.items]
        g = sp.csr_matrix((-2.0 * resid, (train.users, train.items)), shape=shape)
    elif kind == "bpr":
        if pairs is None:
            pairs = bpr_pairs(train)
        u, k, j = pairs
        # d/d(diff) of log(1 + exp(-diff))
        gd = -sigmoid(-(scores[u, k] - scores[u, j]))
        g = sp.csr_matrix(
            (np.concatenate([gd, -gd]), (np.concatenate([u, u]), np.concatenate([k, j]))),
            shape=shape,
        )
    else:
        raise ValueError(f"unknown accuracy objective {kind!r}")
    g.sum_duplicates()
    return g


def _factor_grads(W, model: LatentModel, blocks=("U", "V", "X")) -> dict:
    out = {}
    if "U" in blocks:
        out["U"] = _dense(W @ model.V.T).T
    if "V" in blocks:
        out["V"] = _dense(W.T @ model.U.T).T
    if "X" in blocks and model.is_geo:
        out["X"] = _dense(model.Y @ W.T)
    return out


def _one_column(model, W, which: str, index: int) -> np.ndarray:
    if which == "u":
        return _dense(W[[index], :] @ model.V.T).ravel() if sp.issparse(W) else model.V @ W[index, :]
    if which == "v":
        return _dense(W[:, [index]].T @ model.U.T).ravel() if sp.issparse(W) else model.U @ W[:, index]
    if which == "x":
        if not model.is_geo:
            raise ValueError("x gradient requested on a non-geographical model")
        row = W[[index], :] if sp.issparse(W) else W[index, :][None, :]
        return _dense(model.Y @ row.T).ravel()
    raise ValueError(f"unknown parameter block {which!r}")


def grad_capacity_u(model: LatentModel, ctx: ContextVectors, i: int, surrogate: str = "logistic") -> np.ndarray:
    """Capacity-term gradient for user vector ``u_i`` (alpha not applied)."""
    return _one_column(model, capacity_score_grad(model.scores(), ctx, surrogate), "u", i)


def grad_capacity_v(model: LatentModel, ctx: ContextVectors, j: int, surrogate: str = "logistic") -> np.ndarray:
    """Capacity-term gradient for item vector ``v_j`` (alpha not applied)."""
    return _one_column(model, capacity_score_grad(model.scores(), ctx, surrogate), "v", j)


def grad_capacity_x(model: LatentModel, ctx: ContextVectors, i: int, surrogate: str = "logistic") -> np.ndarray:
    """Capacity-term gradient for activity vector ``x_i`` (alpha not applied)."""
    if not model.is_geo:
        raise ValueError("x gradient requested on a non-geographical model")
    return _one_column(model, capacity_score_grad(model.scores(), ctx, surrogate), "x", i)


def grad_accuracy(model: LatentModel, train: RatingsDataset, kind: str, which: str, index: int,
                  pairs=None) -> np.ndarray:
    """Accuracy-term gradient for ``u_i``, ``v_j`` or ``x_i`` (``which`` in u/v/x)."""
    W = accuracy_score_grad(model.scores(), train, kind, pairs)
    return _one_column(model, W, which, index)


def objective_gradients(model: LatentModel, train: RatingsDataset, ctx: Optional[ContextVectors],
                        cfg: TrainConfig, *, blocks=("U", "V", "X"), scores=None, pairs=None) -> dict:
    """Full gradients of ``objective_value`` for the requested factor blocks.

    The capacity part is skipped entirely when ``alpha == 0`` and the
    accuracy part when ``alpha == 1``.
    """
    if scores is None:
        scores = model.scores()
    alpha = cfg.alpha
    grads = {}
    if alpha != 1.0:
        A = accuracy_score_grad(scores, train, cfg.accuracy, pairs)
        acc = _factor_grads(A, model, blocks)
    if alpha != 0.0:
        if ctx is None:
            raise ValueError("capacity context required when alpha > 0")
        C = capacity_score_grad(scores, ctx, cfg.surrogate)
        cap = _factor_grads(C, model, blocks)
    params = {"U": model.U, "V": model.V, "X": model.X}
    for name in blocks:
        if params[name] is None:
            continue
        if alpha == 0.0:
            g = acc[name]
        elif alpha == 1.0:
            g = cap[name]
        else:
            g = (1.0 - alpha) * acc[name] + alpha * cap[name]
        grads[name] = g + (2.0 * cfg.lam) * params[name]
    return grads


@dataclass
class AdagradState:
    """Per-coordinate sums of squared gradients."""

    sums: dict
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, model: LatentModel, epsilon: float) -> "AdagradState":
        sums = {"U": np.zeros_like(model.U), "V": np.zeros_like(model.V)}
        if model.is_geo:
            sums["X"] = np.zeros_like(model.X)
        return cls(sums, epsilon)

    def step(self, param: np.ndarray, grad: np.ndarray, name: str) -> None:
        acc = self.sums[name]
        acc += grad * grad
        param -= grad / (self.epsilon + np.sqrt(acc))


@dataclass
class TrainTrace:
    breakdowns: list = field(default_factory=list)
    stop_reason: str = "max_iters"
    iterations: int = 0
    clipped: int = 0

    @property
    def totals(self) -> np.ndarray:
        return np.array([b.total for b in self.breakdowns])

    def rows(self):
        for t, b in enumerate(self.breakdowns):
            yield t, b.accuracy_term, b.capacity_term, b.regularization_term, b.total

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("iter,accuracy,capacity,regularization,total\n")
            for t, a, c, r, tot in self.rows():
                f.write(f"{t},{a!r},{c!r},{r!r},{tot!r}\n")


def init_model(num_users: int, num_items: int, cfg: TrainConfig, Y=None) -> LatentModel:
    rng = np.random.default_rng(cfg.seed)
    U = rng.normal(0.0, cfg.init_scale, size=(cfg.rank, num_users))
    V = rng.normal(0.0, cfg.init_scale, size=(cfg.rank, num_items))
    X = None
    if cfg.geo:
        X = rng.normal(0.0, cfg.init_scale, size=(Y.shape[0], num_users))
    return LatentModel(U, V, X, Y if cfg.geo else None)


def _clip_columns(g: np.ndarray, max_norm: float) -> int:
    norms = np.sqrt(np.sum(g * g, axis=0))
    over = norms > max_norm
    if over.any():
        g[:, over] *= max_norm / norms[over]
    return int(np.count_nonzero(over))


def _check_finite(ob: ObjectiveBreakdown, cfg: TrainConfig, it: int) -> None:
    if np.isfinite(ob.total):
        return
    hint = ""
    if cfg.surrogate == "exponential" and not np.isfinite(ob.capacity_term):
        hint = " (exponential surrogate overflow: expected usage exceeds capacity by > 700)"
    raise TrainingError(
        f"non-finite objective at iteration {it}: accuracy={ob.accuracy_term!r}, "
        f"capacity={ob.capacity_term!r}, regularization={ob.regularization_term!r}{hint}"
    )


def train(train_data: RatingsDataset, ctx: Optional[ContextVectors], cfg: TrainConfig, Y=None,
          *, callback=None) -> tuple[LatentModel, TrainTrace]:
    """Fit U, V (and X) by block-alternating Adagrad descent.

    Each iteration updates all user vectors, then all item vectors on the
    new U, then (geo) all activity vectors on the new U and V. Stops when
    the training objective changes by less than ``cfg.tol`` or after
    ``cfg.max_iters`` iterations.
    """
    if cfg.geo and Y is None:
        raise ValueError("geographical training needs the influence matrix Y")
    if cfg.alpha > 0 and ctx is None:
        raise ValueError("capacity context required when alpha > 0")
    if ctx is not None and cfg.alpha > 0:
        if len(ctx.p) != train_data.num_users or len(ctx.c) != train_data.num_items:
            raise ValueError("context vectors do not match the dataset dimensions")
    if cfg.geo and Y.shape[1] != train_data.num_items:
        raise ValueError("influence matrix columns do not match the number of items")

    model = init_model(train_data.num_users, train_data.num_items, cfg, Y)
    pairs = None
    if cfg.accuracy == "bpr":
        pairs = bpr_pairs(train_data, cfg.bpr_max_pairs_per_user, cfg.seed)
    state = AdagradState.zeros_like(model, cfg.adagrad_epsilon)
    blocks = ("U", "V", "X") if model.is_geo else ("U", "V")
    clip = cfg.surrogate == "exponential" and cfg.alpha > 0

    trace = TrainTrace()
    scores = model.scores()
    ob = objective_value(model, train_data, ctx, cfg, scores=scores, pairs=pairs)
    _check_finite(ob, cfg, 0)
    trace.breakdowns.append(ob)
    prev = ob.total

    for it in range(1, cfg.max_iters + 1):
        for name in blocks:
            if scores is None:
                scores = model.scores()
            g = objective_gradients(model, train_data, ctx, cfg, blocks=(name,), scores=scores, pairs=pairs)[name]
            if clip:
                trace.clipped += _clip_columns(g, cfg.clip_norm)
            state.step(getattr(model, name), g, name)
            scores = None
        scores = model.scores()
        ob = objective_value(model, train_data, ctx, cfg, scores=scores, pairs=pairs)
        trace.breakdowns.append(ob)
        trace.iterations = it
        _check_finite(ob, cfg, it)
        if callback is not None:
            callback(it, model, ob)
        if abs(prev - ob.total) < cfg.tol:
            trace.stop_reason = "converged"
            break
        prev = ob.total
    if trace.clipped:
        _log.info("clipped %d gradient vectors (exponential surrogate)", trace.clipped)
    return model, trace


def train_unconstrained(train_data: RatingsDataset, cfg: TrainConfig, Y=None):
    """Plain PMF / BPR / GeoMF / Geo-BPR (no capacity term at all)."""
    return train(train_data, None, replace(cfg, alpha=0.0), Y)


def config_hash(cfg: TrainConfig) -> str:
    text = "\n".join(f"{k}={v!r}" for k, v in sorted(asdict(cfg).items()))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


_MAGIC = b"CAPREC01"
_HEADER = struct.Struct("<8s5q64s")


def save_checkpoint(model: LatentModel, path, cfg_hash: str = "0" * 64) -> None:
    """Binary checkpoint: header (M, N, k, L', geo, hash) then U, V[, X, Y] as little-endian float64."""
    if len(cfg_hash) != 64:
        raise ValueError("config hash must be 64 hex characters")
    geo = int(model.is_geo)
    header = _HEADER.pack(_MAGIC, model.num_users, model.num_items, model.rank,
                          model.geo_dim, geo, cfg_hash.encode("ascii"))
    with open(path, "wb") as f:
        f.write(header)
        mats = [model.U, model.V]
        if geo:
            mats += [model.X, _dense(model.Y)]
        for m in mats:
            f.write(np.ascontiguousarray(m, dtype="<f8").tobytes(order="C"))


def load_checkpoint(path, sparse_y: bool = True) -> tuple[LatentModel, str]:
    with open(path, "rb") as f:
        raw = f.read()
    magic, M, N, k, L, geo, h = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    off = _HEADER.size

    def take(rows, cols):
        nonlocal off
        n = rows * cols * 8
        if off + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        m = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += n
        return m

    U, V = take(k, M), take(k, N)
    X = Y = None
    if geo:
        X, Y = take(L, M), take(L, N)
        if sparse_y:
            Y = sp.csr_matrix(Y)
    return LatentModel(U, V, X, Y), h.decode("ascii")
