"""Config-driven experiment pipeline: prepare artifacts, run sweeps, post-process baselines.

Config files are flat UTF-8 ``key = value`` lines; ``#`` starts a comment and
list values are comma separated. The config hash is the SHA-256 of the
canonical text (semantic keys, sorted, one ``key=value`` per line).
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import context, geo, ingest
from .core import ContextVectors, TrainConfig
from .evaluate import (
    MetricsReport,
    candidate_mask,
    evaluate,
    post_process_baseline,
    rank_items,
    recommendation_load,
)
from .train import TrainingError, load_checkpoint, save_checkpoint, train

_log = logging.getLogger(__name__)

MODEL_FAMILIES = {
    "pmf": ("square", False),
    "bpr": ("bpr", False),
    "geomf": ("square", True),
    "geobpr": ("bpr", True),
}
VARIANTS = ("constrained", "unconstrained", "onlycap", "postprocess")
# keys that change how a run executes but not what it computes
RUNTIME_KEYS = ("output", "threads", "reference_mode")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data: str = ""
    format: str = "movielens-tab"
    dataset: str = "dataset"
    pois: Optional[str] = None
    feedback: str = "implicit01"
    min_ratings: Optional[int] = None
    capacity: str = "actual"
    propensity: str = "actual"
    capacities_file: Optional[str] = None
    propensities_file: Optional[str] = None
    models: list = field(default_factory=lambda: ["pmf"])
    variants: list = field(default_factory=lambda: ["constrained"])
    alphas: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    surrogate: str = "logistic"
    repetitions: int = 5
    seeds: Optional[list] = None
    tops: list = field(default_factory=lambda: [1, 5, 10])
    rank: int = 10
    lam: float = 1e-5
    tol: float = 1e-5
    max_iters: int = 3000
    init_scale: float = 0.1
    adagrad_epsilon: float = 1e-8
    bpr_max_pairs_per_user: Optional[int] = None
    bandwidth: float = 1.0
    level: int = 15
    save_checkpoints: bool = True
    output: str = "out"
    threads: int = 1
    reference_mode: bool = False

    def __post_init__(self):
        if self.format not in ingest.FORMATS:
            raise ConfigError(f"format must be one of {ingest.FORMATS}")
        if self.feedback not in ("implicit01", "explicit-threshold4"):
            raise ConfigError("feedback must be implicit01 or explicit-threshold4")
        for m in self.models:
            if m not in MODEL_FAMILIES:
                raise ConfigError(f"unknown model family {m!r}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        for a in self.alphas:
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"alpha {a} outside [0, 1]")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.repetitions:
            self.repetitions = len(self.seeds)
        context.CapacityKind.parse(self.capacity)
        if self.propensity not in context.PROPENSITY_KINDS:
            raise ConfigError(f"unknown propensity kind {self.propensity!r}")

    @property
    def seed_list(self) -> list:
        return list(self.seeds) if self.seeds is not None else list(range(self.repetitions))

    @property
    def needs_geo(self) -> bool:
        return any(MODEL_FAMILIES[m][1] for m in self.models)

    @property
    def threshold(self) -> int:
        if self.min_ratings is not None:
            return self.min_ratings
        return 10 if self.format == "checkin-tsv" else 0

    def canonical_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name in RUNTIME_KEYS:
                continue
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(sorted(lines)) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def train_config(self, model: str, alpha: float, seed: int) -> TrainConfig:
        accuracy, is_geo = MODEL_FAMILIES[model]
        return TrainConfig(
            alpha=alpha, lam=self.lam, rank=self.rank, surrogate=self.surrogate,
            accuracy=accuracy, geo=is_geo, max_iters=self.max_iters, tol=self.tol,
            seed=seed, adagrad_epsilon=self.adagrad_epsilon, init_scale=self.init_scale,
            bpr_max_pairs_per_user=self.bpr_max_pairs_per_user,
        )


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_parser(f):
    name = f.name
    default = f.default if f.default is not None else None
    if name in ("models", "variants"):
        return lambda s: [x.strip() for x in s.split(",") if x.strip()]
    if name == "alphas":
        return lambda s: [float(x) for x in s.split(",") if x.strip()]
    if name in ("seeds", "tops"):
        return lambda s: [int(x) for x in s.split(",") if x.strip()]
    if name in ("min_ratings", "bpr_max_pairs_per_user"):
        return lambda s: int(s) if s.strip() else None
    if isinstance(default, bool):
        return lambda s: s.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return lambda s: s.strip() or None if default is None else s.strip()


def config_keys() -> list:
    return [f.name for f in fields(ExperimentConfig)]


def parse_config_text(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        raw[k.strip()] = v.strip()
    raw.update(overrides or {})
    parsers = {f.name: _field_parser(f) for f in fields(ExperimentConfig)}
    kwargs = {}
    for k, v in raw.items():
        if k not in parsers:
            raise ConfigError(f"unknown config key {k!r}")
        try:
            kwargs[k] = parsers[k](v)
        except ValueError as e:
            raise ConfigError(f"bad value for {k}: {v!r} ({e})") from None
    return ExperimentConfig(**kwargs)


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    cfg = parse_config_text(Path(path).read_text(encoding="utf-8"), overrides)
    base = Path(path).resolve().parent
    # relative data paths are taken relative to the config file
    for key in ("data", "pois", "capacities_file", "propensities_file"):
        val = getattr(cfg, key)
        if val and not Path(val).is_absolute() and not Path(val).exists():
            setattr(cfg, key, str(base / val))
    return cfg


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------- prepare

def cmd_prepare(cfg: ExperimentConfig) -> Path:
    """Filter, polarize, split, sample negatives and derive context vectors per seed."""
    out = Path(cfg.output)
    if not cfg.data:
        raise ConfigError("config key 'data' (raw interaction file) is required")
    if cfg.needs_geo and not cfg.pois:
        raise ConfigError("geographical models need the POI coordinate file (config key 'pois')")
    if cfg.pois and not Path(cfg.pois).exists():
        raise FileNotFoundError(f"POI coordinate file not found: {cfg.pois}")
    if not Path(cfg.data).exists():
        raise FileNotFoundError(f"interaction file not found: {cfg.data}")
    out.mkdir(parents=True, exist_ok=True)

    raw = ingest.parse_interactions(cfg.data, cfg.format, cfg.pois)
    data = ingest.to_dataset(raw)
    if cfg.threshold > 0:
        data = ingest.filter_min_ratings(data, cfg.threshold)
    data = ingest.polarize(data, cfg.feedback)
    ingest.save_ids(data.user_ids, out / "users.tsv")
    ingest.save_ids(data.item_ids, out / "items.tsv")
    _log.info("dataset: %d users, %d items, %d ratings", data.num_users, data.num_items, len(data))

    if cfg.pois:
        coords = {r.item_id: (r.lat, r.lon) for r in raw}
        inf = geo.influence_from_coordinates(data.item_ids, coords, cfg.bandwidth, cfg.level)
        geo.save_influence(inf, out / "influence.csv")
        geo.save_tiles(inf, out / "tiles.csv")
        _log.info("influence matrix: %d occupied tiles", inf.geo_dim)

    for seed in cfg.seed_list:
        d = out / f"seed_{seed}"
        d.mkdir(exist_ok=True)
        tr, te = ingest.split_train_test(data, ingest.SplitSpec(seed))
        ctx = _context_for(cfg, tr)
        if data.feedback_mode == "implicit01":
            tr = ingest.sample_negatives(tr, te, seed)
            te_all = ingest.sample_negatives(te, tr, seed, stream=2)
            ingest.save_dataset(te_all.select(te_all.values < 0), d / "test_negatives.tsv")
        ingest.save_dataset(tr, d / "train.tsv")
        ingest.save_dataset(te, d / "test.tsv")
        context.save_vector(ctx.c, d / "capacities.csv")
        context.save_vector(ctx.p, d / "propensities.csv")
    _atomic_write(out / "manifest.txt", f"# config_hash={cfg.hash()}\n" + cfg.canonical_text())
    return out


def _context_for(cfg: ExperimentConfig, train_split) -> ContextVectors:
    # derived from observed training ratings, before negatives are sampled
    if cfg.capacities_file:
        c = context.load_vector(cfg.capacities_file, train_split.num_items)
    else:
        c = context.make_capacities(train_split, cfg.capacity)
    if cfg.propensities_file:
        p = context.load_vector(cfg.propensities_file, train_split.num_users)
    else:
        p = context.make_propensities(train_split, cfg.propensity)
    return ContextVectors(p, c)


@dataclass
class SeedArtifacts:
    train: object
    test: object
    test_negatives: object
    ctx: ContextVectors
    Y: object = None


def load_artifacts(cfg: ExperimentConfig, seed: int) -> SeedArtifacts:
    out = Path(cfg.output)
    d = out / f"seed_{seed}"
    if not (d / "train.tsv").exists():
        raise FileNotFoundError(f"prepared artifacts missing for seed {seed} under {out}; run 'prepare' first")
    tr = ingest.load_dataset(d / "train.tsv")
    te = ingest.load_dataset(d / "test.tsv")
    neg = ingest.load_dataset(d / "test_negatives.tsv") if (d / "test_negatives.tsv").exists() else None
    ctx = ContextVectors(
        context.load_vector(d / "propensities.csv", tr.num_users),
        context.load_vector(d / "capacities.csv", tr.num_items),
    )
    Y = None
    if (out / "influence.csv").exists():
        Y = geo.load_influence(out / "influence.csv").Y
    return SeedArtifacts(tr, te, neg, ctx, Y)


# ---------------------------------------------------------------- cells

KEY_COLUMNS = [
    "dataset", "model", "variant", "alpha", "accuracy_weight", "surrogate",
    "capacity_kind", "propensity_kind", "seed", "config_hash", "status",
    "iterations", "stop_reason",
]


def metric_columns(tops) -> list:
    cols = ["rmse", "pairwise01", "capacity_loss", "overall"]
    for k in tops:
        cols += [f"map@{k}", f"wap@{k}", f"wmcv@{k}"]
    cols.append("ap_excluded")
    return cols


def sweep_cells(cfg: ExperimentConfig) -> list:
    cells = []
    for model in cfg.models:
        for variant in cfg.variants:
            if variant == "constrained":
                alphas = cfg.alphas
            elif variant == "onlycap":
                alphas = [1.0]
            else:
                alphas = [0.0]
            for alpha in alphas:
                for seed in cfg.seed_list:
                    cells.append((model, variant, float(alpha), seed))
    return cells


def cell_name(model, variant, alpha, seed) -> str:
    return f"{model}_{variant}_a{alpha:g}_s{seed}"


def run_cell(cfg: ExperimentConfig, cell, art: Optional[SeedArtifacts] = None) -> dict:
    """Train and evaluate one (model, variant, alpha, seed) cell; never raises on training failure."""
    model_name, variant, alpha, seed = cell
    if art is None:
        art = load_artifacts(cfg, seed)
    row = {
        "dataset": cfg.dataset, "model": model_name, "variant": variant, "alpha": alpha,
        "accuracy_weight": 1.0 - alpha, "surrogate": cfg.surrogate,
        "capacity_kind": cfg.capacity, "propensity_kind": cfg.propensity, "seed": seed,
        "config_hash": cfg.hash(), "status": "ok", "iterations": 0, "stop_reason": "",
    }
    tcfg = cfg.train_config(model_name, alpha, seed)
    if tcfg.geo and art.Y is None:
        raise ConfigError(f"model {model_name} needs the influence matrix; prepare with 'pois' set")
    try:
        model, trace = train(art.train, art.ctx if alpha > 0 else None, tcfg, art.Y if tcfg.geo else None)
    except TrainingError as e:
        row["status"] = f"aborted: {e}"
        return row
    row["iterations"] = trace.iterations
    row["stop_reason"] = trace.stop_reason
    ranked = None
    if variant == "postprocess":
        labelled = art.test if art.test_negatives is None else art.test.concat(art.test_negatives)
        ranked = post_process_baseline(model.scores(), art.ctx, max(cfg.tops), candidate_mask(labelled))
    report = evaluate(model, art.test, art.ctx, alpha, tcfg.accuracy, cfg.tops, cfg.surrogate,
                      test_negatives=art.test_negatives, ranked=ranked)
    row.update(report.as_row(cfg.tops))
    if cfg.save_checkpoints:
        out = Path(cfg.output)
        (out / "checkpoints").mkdir(exist_ok=True)
        (out / "traces").mkdir(exist_ok=True)
        name = cell_name(model_name, variant, alpha, seed)
        save_checkpoint(model, out / "checkpoints" / f"{name}.ckpt", cfg.hash())
        trace.to_csv(out / "traces" / f"{name}.csv")
    return row


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def summarize(rows, tops) -> list:
    """One summary row (mean, plus ``*_std`` columns) per (model, variant, alpha)."""
    mcols = metric_columns(tops)
    groups = {}
    for r in rows:
        groups.setdefault((r["model"], r["variant"], r["alpha"]), []).append(r)
    out = []
    for (model, variant, alpha), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        s = dict(rs[0])
        s.update(seed="summary", status=f"ok {len(ok)}/{len(rs)}", iterations="", stop_reason="")
        for c in mcols:
            vals = np.array([r[c] for r in ok], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            s[c] = float(vals.mean()) if len(vals) else math.nan
            s[f"{c}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else math.nan
        out.append(s)
    return out


def _limit_blas_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(1)


def _pool_cell(args):
    cfg, cell = args
    _limit_blas_threads()
    return run_cell(cfg, cell)


def cmd_sweep(cfg: ExperimentConfig) -> Path:
    """Train/evaluate every cell; write ``metrics.csv`` (cell rows then summary rows)."""
    out = Path(cfg.output)
    cells = sweep_cells(cfg)
    limiter = _limit_blas_threads() if cfg.reference_mode else None
    if cfg.threads > 1 and not cfg.reference_mode:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            rows = list(pool.map(_pool_cell, [(cfg, c) for c in cells]))
    else:
        cache = {}
        rows = []
        for cell in cells:
            seed = cell[3]
            if seed not in cache:
                cache[seed] = load_artifacts(cfg, seed)
            _log.info("cell %s", cell_name(*cell))
            rows.append(run_cell(cfg, cell, cache[seed]))
    if limiter is not None:
        limiter.restore_original_limits()
    mcols = metric_columns(cfg.tops)
    columns = KEY_COLUMNS + mcols + [f"{c}_std" for c in mcols]
    path = out / "metrics.csv"
    _atomic_write(path, _rows_to_csv(rows + summarize(rows, cfg.tops), columns))
    return path


# ---------------------------------------------------------------- baseline

BASELINE_COLUMNS = ["dataset", "model", "method", "seed", "top", "map", "wap", "wmcv", "config_hash"]


def cmd_baseline(cfg: ExperimentConfig, checkpoint: Optional[str] = None) -> Path:
    """Apply the post-processing baseline to unconstrained checkpoints.

    Writes ``baseline.csv`` (unconstrained vs. post-processed MAP/WAP/WMCV
    per top) and ``baseline_audit.csv`` (per-item recipients vs. floor(c_j)).
    """
    from .evaluate import map_at_k, wap_at_k, wmcv_at_k

    out = Path(cfg.output)
    rows, audit = [], []
    for model_name in cfg.models:
        for seed in cfg.seed_list:
            ckpt = Path(checkpoint) if checkpoint else out / "checkpoints" / f"{cell_name(model_name, 'unconstrained', 0.0, seed)}.ckpt"
            if not ckpt.exists():
                raise FileNotFoundError(f"missing checkpoint: {ckpt}")
            model, _ = load_checkpoint(ckpt)
            art = load_artifacts(cfg, seed)
            labelled = art.test if art.test_negatives is None else art.test.concat(art.test_negatives).sorted()
            scores = model.scores()
            cand = candidate_mask(labelled)
            top_max = max(cfg.tops)
            methods = {
                "unconstrained": rank_items(scores, cand).top(top_max),
                "postprocess": post_process_baseline(scores, art.ctx, top_max, cand),
            }
            for method, ranked in methods.items():
                for k in cfg.tops:
                    rows.append({
                        "dataset": cfg.dataset, "model": model_name, "method": method, "seed": seed,
                        "top": k, "map": map_at_k(ranked, labelled, k),
                        "wap": wap_at_k(ranked, labelled, art.ctx.p, k),
                        "wmcv": wmcv_at_k(ranked, art.ctx, k), "config_hash": cfg.hash(),
                    })
            ones = np.ones(labelled.num_users)
            quota = np.floor(art.ctx.c).astype(np.int64)
            for k in cfg.tops:
                counts = recommendation_load(methods["postprocess"], ones, labelled.num_items, k).astype(np.int64)
                for j in range(labelled.num_items):
                    audit.append({"model": model_name, "seed": seed, "top": k, "item": j,
                                  "recipients": int(counts[j]), "quota": int(quota[j])})
    _atomic_write(out / "baseline.csv", _rows_to_csv(rows, BASELINE_COLUMNS))
    _atomic_write(out / "baseline_audit.csv",
                  _rows_to_csv(audit, ["model", "seed", "top", "item", "recipients", "quota"]))
    return out / "baseline.csv"


def cmd_eval(cfg: ExperimentConfig, checkpoint, seed: int, alpha: float, model_name: str) -> MetricsReport:
    model, _ = load_checkpoint(checkpoint)
    art = load_artifacts(cfg, seed)
    accuracy = MODEL_FAMILIES[model_name][0]
    return evaluate(model, art.test, art.ctx, alpha, accuracy, cfg.tops, cfg.surrogate,
                    test_negatives=art.test_negatives)


def cmd_train(cfg: ExperimentConfig, model_name: str, variant: str, alpha: float, seed: int) -> dict:
    if variant == "unconstrained":
        alpha = 0.0
    elif variant == "onlycap":
        alpha = 1.0
    cfg = replace(cfg, save_checkpoints=True)
    return run_cell(cfg, (model_name, variant, float(alpha), seed))
