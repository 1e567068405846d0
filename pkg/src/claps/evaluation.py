"""Metrics, seed aggregation and the experiment / ablation runners.

A run is described by an :class:`ExperimentConfig`. Each seed is an
independent unit: split, train the backbone and its auxiliary heads, fit
the Laplace head, calibrate every requested method, evaluate on the test
split and compute diagnostics. :func:`write_report` lays the result out as
``report.json``, ``metrics.csv``, ``diagnostics.json`` and ``ablation.csv``.
"""

import csv
import datetime
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import stats
from scipy.special import ndtri

from . import backbone, conformal, data, diagnostics, llla
from .exceptions import (
    ConfigInvalid,
    DegenerateDof,
    EmptyInput,
    InvalidCounts,
    LengthMismatch,
    TooFewSeeds,
)

log = logging.getLogger(__name__)

REPORT_VERSION = 1
DEFAULT_LAM_GRID = (0.1, 0.3, 1.0, 3.0, 10.0)
DEFAULT_ESTIMATORS = ("residual", "evidence")


# ---------------------------------------------------------------- metrics


def _bounds(intervals):
    if isinstance(intervals, conformal.Interval):
        return np.atleast_1d(np.asarray(intervals.lo, float)), np.atleast_1d(np.asarray(intervals.hi, float))
    lo = np.array([iv.lo for iv in intervals], dtype=float)
    hi = np.array([iv.hi for iv in intervals], dtype=float)
    return lo, hi


def covered_mask(intervals, y):
    lo, hi = _bounds(intervals)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if lo.shape != y.shape:
        raise LengthMismatch(f"{lo.size} intervals but {y.size} targets")
    return (lo <= y) & (y <= hi)


def coverage(intervals, y):
    """Fraction of ``y`` inside its closed interval; infinite bounds always cover."""
    mask = covered_mask(intervals, y)
    if mask.size == 0:
        raise EmptyInput("no test points")
    return int(mask.sum()) / mask.size


def mean_width(intervals):
    """Mean of ``hi - lo``; a single unbounded interval makes the mean ``inf``."""
    lo, hi = _bounds(intervals)
    if lo.size == 0:
        raise EmptyInput("no intervals")
    w = hi - lo
    if np.any(np.isinf(w)):
        return math.inf
    return float(np.mean(w))


def mae(mu, y):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if mu.shape != y.shape:
        raise LengthMismatch(f"{mu.size} predictions but {y.size} targets")
    if mu.size == 0:
        raise EmptyInput("no test points")
    return float(np.mean(np.abs(y - mu)))


def wilson_interval(successes, n, conf=0.95):
    """Wilson score interval for a binomial proportion."""
    if n < 1 or successes < 0 or successes > n or int(successes) != successes or int(n) != n:
        raise InvalidCounts(f"need 0 <= successes <= n and n >= 1, got {successes}/{n}")
    if not 0 < conf < 1:
        raise ValueError(f"conf must lie in (0, 1), got {conf}")
    z = float(ndtri(0.5 + conf / 2.0))
    p = successes / n
    z2n = z * z / n
    centre = (p + z2n / 2.0) / (1.0 + z2n)
    half = z * math.sqrt(p * (1.0 - p) / n + z2n / (4.0 * n)) / (1.0 + z2n)
    lo, hi = centre - half, centre + half
    if successes == 0:
        lo = 0.0
    if successes == n:
        hi = 1.0
    return max(lo, 0.0), min(hi, 1.0)


def t_interval(values, conf=0.95):
    """``mean +/- t_{k-1} * sd / sqrt(k)`` over per-seed values."""
    v = np.asarray(values, dtype=float).ravel()
    k = v.size
    if k < 2:
        raise TooFewSeeds(f"need at least 2 values, got {k}")
    m = float(np.mean(v))
    if np.any(np.isinf(v)):
        return m, m
    half = float(stats.t.ppf(0.5 + conf / 2.0, k - 1)) * float(np.std(v, ddof=1)) / math.sqrt(k)
    return m - half, m + half


# ----------------------------------------------------------------- config


@dataclass
class DatasetConfig:
    kind: str = "linear_gaussian"
    path: str = None
    target: object = -1
    delimiter: str = ","
    test_path: str = None
    n: int = 2000
    d: int = 8
    sigma: float = 1.0
    base: float = 0.1
    slope: float = 0.5
    seed: int = 0


@dataclass
class SplitConfig:
    train_frac: float = 0.6
    cal_frac: float = 0.2
    test_frac: float = 0.2
    counts: list = None


@dataclass
class BackboneConfig:
    hidden_widths: list = field(default_factory=lambda: [128, 128])
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    quantile_levels: list = field(default_factory=lambda: [0.05, 0.95])


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    methods: list = field(default_factory=lambda: list(conformal.METHODS))
    target_cov: float = 0.9
    lam: float = 1.0
    estimator: str = "residual"
    lam_grid: list = field(default_factory=lambda: list(DEFAULT_LAM_GRID))
    estimators: list = field(default_factory=lambda: list(DEFAULT_ESTIMATORS))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    thresholds: dict = field(default_factory=lambda: asdict(diagnostics.SelectionThresholds()))
    subsample_points: int = 5
    save_models: bool = True
    run_name: str = "run"
    output_dir: str = "claps-runs"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        """Build and validate a config; unknown or invalid fields raise :class:`ConfigInvalid`."""
        d = dict(d or {})
        _reject_unknown(d, cls, "")
        sub = {}
        for name, sub_cls in (("dataset", DatasetConfig), ("split", SplitConfig), ("backbone", BackboneConfig)):
            raw = d.pop(name, None) or {}
            if not isinstance(raw, dict):
                raise ConfigInvalid(name, "must be an object")
            _reject_unknown(raw, sub_cls, name + ".")
            sub[name] = sub_cls(**raw)
        cfg = cls(**sub, **d)
        cfg.validate()
        return cfg

    def validate(self):
        ds = self.dataset
        if ds.kind not in ("csv", "linear_gaussian", "heteroscedastic"):
            raise ConfigInvalid("dataset.kind", f"unknown kind {ds.kind!r}")
        if ds.kind == "csv":
            if not ds.path:
                raise ConfigInvalid("dataset.path", "required for csv datasets")
            if not os.path.exists(ds.path):
                raise ConfigInvalid("dataset.path", f"file not found: {ds.path}")
            if ds.test_path and not os.path.exists(ds.test_path):
                raise ConfigInvalid("dataset.test_path", f"file not found: {ds.test_path}")
        else:
            _positive_int(ds.n, "dataset.n")
            if ds.kind == "linear_gaussian":
                _positive_int(ds.d, "dataset.d")
            if ds.sigma < 0:
                raise ConfigInvalid("dataset.sigma", "must be nonnegative")
        sp = self.split
        if sp.counts is not None:
            if len(sp.counts) != 3 or any(int(c) != c or c < 1 for c in sp.counts):
                raise ConfigInvalid("split.counts", "must be three positive integers [train, cal, test]")
        else:
            fr = (sp.train_frac, sp.cal_frac, sp.test_frac)
            if any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
                raise ConfigInvalid("split", f"fractions must be nonnegative and sum to 1, got {fr}")
        bb = self.backbone
        if not bb.hidden_widths or any(int(w) != w or w < 1 for w in bb.hidden_widths):
            raise ConfigInvalid("backbone.hidden_widths", "must be a nonempty list of positive integers")
        if int(bb.epochs) != bb.epochs or bb.epochs < 0:
            raise ConfigInvalid("backbone.epochs", "must be a nonnegative integer")
        _positive_int(bb.batch_size, "backbone.batch_size")
        if not bb.learning_rate > 0:
            raise ConfigInvalid("backbone.learning_rate", "must be positive")
        if len(bb.quantile_levels) != 2 or not 0 < bb.quantile_levels[0] < bb.quantile_levels[1] < 1:
            raise ConfigInvalid("backbone.quantile_levels", "need 0 < lo < hi < 1")
        if not self.methods:
            raise ConfigInvalid("methods", "must be nonempty")
        bad = [m for m in self.methods if m not in conformal.METHODS]
        if bad:
            raise ConfigInvalid("methods", f"unknown method(s) {bad}; choose from {list(conformal.METHODS)}")
        if not 0 < self.target_cov < 1:
            raise ConfigInvalid("target_cov", "must lie in (0, 1)")
        if not self.lam > 0:
            raise ConfigInvalid("lam", "must be positive")
        if self.estimator not in llla.ESTIMATORS:
            raise ConfigInvalid("estimator", f"must be one of {list(llla.ESTIMATORS)}")
        if not self.lam_grid or any(not lam > 0 for lam in self.lam_grid):
            raise ConfigInvalid("lam_grid", "every lambda must be positive")
        if not self.estimators or any(e not in llla.ESTIMATORS for e in self.estimators):
            raise ConfigInvalid("estimators", f"each must be one of {list(llla.ESTIMATORS)}")
        if not self.seeds:
            raise ConfigInvalid("seeds", "must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigInvalid("seeds", "must be distinct")
        try:
            diagnostics.SelectionThresholds(**self.thresholds)
        except TypeError as exc:
            raise ConfigInvalid("thresholds", str(exc)) from None
        if self.subsample_points < 0:
            raise ConfigInvalid("subsample_points", "must be nonnegative")
        if not self.run_name or os.sep in self.run_name:
            raise ConfigInvalid("run_name", "must be a plain directory name")


def _reject_unknown(d, cls, prefix):
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigInvalid(prefix + key, "unknown field")


def _positive_int(v, name):
    if int(v) != v or v < 1:
        raise ConfigInvalid(name, "must be a positive integer")


def load_dataset(cfg):
    """Return ``(dataset, fixed_test_or_None)`` for the configured source."""
    ds = cfg.dataset
    if ds.kind == "csv":
        full = data.load_csv(ds.path, ds.target, ds.delimiter)
        test = data.load_csv(ds.test_path, ds.target, ds.delimiter) if ds.test_path else None
        return full, test
    if ds.kind == "linear_gaussian":
        return data.synth_linear_gaussian(ds.n, ds.d, sigma=ds.sigma, seed=ds.seed), None
    return data.synth_heteroscedastic(ds.n, seed=ds.seed, base=ds.base, slope=ds.slope), None


def make_splits(cfg, dataset, fixed_test, seed):
    sp = cfg.split
    if sp.counts is not None:
        return data.split_counts(dataset, *[int(c) for c in sp.counts], seed=seed)
    spec = data.SplitSpec(sp.train_frac, sp.cal_frac, sp.test_frac, seed)
    return data.split(dataset, spec, fixed_test=fixed_test)


# ----------------------------------------------------------------- runner


@dataclass
class MetricsRow:
    method: str
    seed: int
    coverage: float
    covered: int
    n_test: int
    width_mean: float
    width_infinite: bool
    mae: float
    threshold: float
    rank_k: int
    m: int


@dataclass
class SeedResult:
    seed: int
    rows: list
    failures: list
    diagnostics: dict
    audit: dict
    artifacts: dict = field(default_factory=dict)


def _train_config(cfg, seed):
    bb = cfg.backbone
    return backbone.TrainConfig(
        epochs=int(bb.epochs), batch_size=int(bb.batch_size), learning_rate=float(bb.learning_rate), seed=seed
    )


def train_backbone(cfg, splits, seed):
    spec = backbone.MlpSpec(
        input_dim=splits.train.x.shape[1],
        hidden_widths=tuple(int(w) for w in cfg.backbone.hidden_widths),
        quantile_levels=tuple(cfg.backbone.quantile_levels),
    )
    return backbone.train(spec, splits.train.x, splits.train.y, "mse", _train_config(cfg, seed))


def fit_posterior(model, phi_train, y_train, lam, estimator):
    """Fit the Laplace head; evidence falls back to the residual estimator on degenerate dof."""
    y_c = y_train - model.y_center
    try:
        return llla.fit_llla(phi_train, y_c, lam, estimator)
    except DegenerateDof as exc:
        log.warning("evidence estimator degenerate (%s); using residual estimator", exc)
        return llla.fit_llla(phi_train, y_c, lam, "residual")


def _interval_metrics(method, seed, iv, y, point, cal):
    mask = covered_mask(iv, y)
    width = mean_width(iv)
    return MetricsRow(
        method=method,
        seed=seed,
        coverage=int(mask.sum()) / mask.size,
        covered=int(mask.sum()),
        n_test=int(mask.size),
        width_mean=width,
        width_infinite=math.isinf(width),
        mae=mae(point, y),
        threshold=cal.threshold,
        rank_k=cal.rank_k,
        m=cal.m,
    )


def _method_claps(ctx):
    pred_cal = llla.predictive(ctx["post"], ctx["phi_cal"], ctx["model"].y_center)
    cal = conformal.calibrate_claps(pred_cal, ctx["cal"].y, ctx["target_cov"])
    pred = ctx["pred_test"]
    iv = conformal.claps_interval(pred, cal.threshold, cal.z_threshold)
    return iv, pred.mu, cal, {"z_scores": conformal.standardized_residual(pred_cal, ctx["cal"].y)}


def _method_baseline(ctx):
    model = ctx["model"]
    mu_cal = backbone.head_forward(model, ctx["cal"].x, ctx["phi_cal"])
    scores = conformal.abs_residual_score(mu_cal, ctx["cal"].y)
    cal = conformal.calibrate("baseline_cp", scores, ctx["target_cov"])
    mu = backbone.head_forward(model, ctx["test"].x, ctx["phi_test"])
    return conformal.residual_interval(mu, cal.threshold), mu, cal, {}


def _method_normcp(ctx):
    model = ctx["model"]
    tr = ctx["train"]
    mu_tr = backbone.head_forward(model, tr.x, ctx["phi_train"])
    scale = backbone.train_head(model, tr.x, np.abs(tr.y - mu_tr), "scale", ctx["train_cfg"], ctx["phi_train"])

    def h(x, phi):
        return np.maximum(backbone.head_forward(scale, x, phi), backbone.SCALE_FLOOR)

    mu_cal = backbone.head_forward(model, ctx["cal"].x, ctx["phi_cal"])
    scores = conformal.normalized_score(mu_cal, h(ctx["cal"].x, ctx["phi_cal"]), ctx["cal"].y)
    cal = conformal.calibrate("norm_cp", scores, ctx["target_cov"])
    mu = backbone.head_forward(model, ctx["test"].x, ctx["phi_test"])
    iv = conformal.normcp_interval(mu, h(ctx["test"].x, ctx["phi_test"]), cal.threshold)
    return iv, mu, cal, {}


def _method_cqr(ctx):
    model = ctx["model"]
    tr = ctx["train"]
    qmodel = backbone.train_head(model, tr.x, tr.y, "quantile_pair", ctx["train_cfg"], ctx["phi_train"])
    q_cal = backbone.head_forward(qmodel, ctx["cal"].x, ctx["phi_cal"])
    scores = conformal.cqr_score(q_cal[:, 0], q_cal[:, 1], ctx["cal"].y)
    cal = conformal.calibrate("cqr", scores, ctx["target_cov"])
    q = backbone.head_forward(qmodel, ctx["test"].x, ctx["phi_test"])
    iv, n_clamped = conformal.cqr_interval(q[:, 0], q[:, 1], cal.threshold, return_clamped=True)
    return iv, 0.5 * (q[:, 0] + q[:, 1]), cal, {"n_clamped": n_clamped}


METHOD_RUNNERS = {
    "claps": _method_claps,
    "baseline_cp": _method_baseline,
    "norm_cp": _method_normcp,
    "cqr": _method_cqr,
}


def _audit(row, iv, y, pred=None, cal=None):
    lo, hi = _bounds(iv)
    recount = sum(1 for a, b, t in zip(lo.tolist(), hi.tolist(), np.asarray(y).tolist()) if a <= t <= b)
    out = {"coverage_recount_ok": recount == row.covered}
    if pred is not None and not row.width_infinite:
        # t itself underflows to 0 once |z| > ~38, so prefer the calibrated |z| threshold
        if cal is not None and cal.z_threshold is not None:
            half = cal.z_threshold
            out["claps_z_threshold"] = half
        else:
            # -Phi^{-1}(t) rather than Phi^{-1}(1-t): 1-t rounds to 1 once t < 1e-17
            half = -ndtri(row.threshold) if row.threshold > 0 else math.inf
        closed = float(np.mean(2.0 * np.sqrt(pred.v) * half))
        out["claps_width_closed_form_ok"] = math.isclose(closed, row.width_mean, rel_tol=1e-9, abs_tol=1e-12)
    return out


def run_seed(cfg, seed, dataset=None, fixed_test=None, splits=None):
    """Execute one seed end to end; a failing method is recorded, the others still run."""
    if splits is None:
        if dataset is None:
            dataset, fixed_test = load_dataset(cfg)
        splits = make_splits(cfg, dataset, fixed_test, seed)
    model = train_backbone(cfg, splits, seed)
    phi = {name: backbone.features(model, getattr(splits, name).x) for name in ("train", "cal", "test")}
    post = fit_posterior(model, phi["train"], splits.train.y, cfg.lam, cfg.estimator)
    pred_test = llla.predictive(post, phi["test"], model.y_center)
    ctx = {
        "model": model,
        "post": post,
        "train": splits.train,
        "cal": splits.cal,
        "test": splits.test,
        "phi_train": phi["train"],
        "phi_cal": phi["cal"],
        "phi_test": phi["test"],
        "pred_test": pred_test,
        "target_cov": cfg.target_cov,
        "train_cfg": _train_config(cfg, seed),
    }
    rows, failures, audit, artifacts = [], [], {}, {"model": model, "post": post, "splits": splits}
    for method in cfg.methods:
        try:
            iv, point, cal, extra = METHOD_RUNNERS[method](ctx)
            row = _interval_metrics(method, seed, iv, splits.test.y, point, cal)
        except Exception as exc:  # noqa: BLE001 - one method must not sink the run
            log.error("seed %d: method %s failed: %s", seed, method, exc)
            failures.append({"seed": seed, "method": method, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append(row)
        audit[method] = _audit(row, iv, splits.test.y, pred_test if method == "claps" else None, cal)
        if "n_clamped" in extra:
            audit[method]["cqr_clamped"] = extra["n_clamped"]
        if method == "claps":
            artifacts["claps_z_scores"] = extra["z_scores"]

    diag = seed_diagnostics(cfg, post, phi, splits, pred_test, seed, model.y_center)
    return SeedResult(seed, rows, failures, diag, audit, artifacts)


def seed_diagnostics(cfg, post, phi, splits, pred_test, seed, y_center):
    _, _, s_cal = diagnostics.decompose(post, phi["cal"], "calibration")
    _, _, s_test = diagnostics.decompose(post, phi["test"], "test")
    sp = diagnostics.spearman(np.abs(splits.test.y - pred_test.mu), np.sqrt(pred_test.v))
    verdict = diagnostics.select_method(s_test, sp, diagnostics.SelectionThresholds(**cfg.thresholds))
    out = {
        "seed": seed,
        "lambda": post.lam,
        "sigma2_estimator": post.sigma2_estimator,
        "evidence_iterations": post.evidence_iterations,
        "decomposition": [s_cal.table_row(), s_test.table_row()],
        "spearman": asdict(sp),
        "selection": verdict.to_dict(),
    }
    if cfg.subsample_points:
        grid = diagnostics.default_grid(phi["train"].shape[0], cfg.subsample_points)
        curves = diagnostics.subsample_curves(
            phi["train"], splits.train.y - y_center, grid, phi["test"], post.lam, post.sigma2_estimator, seed
        )
        out["subsample"] = [asdict(p) for p in curves]
    return out


def _aggregate(rows, conf=0.95):
    by_method = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r)
    out = {}
    for method, rs in by_method.items():
        agg = {"method": method, "seeds": [r.seed for r in rs]}
        for metric in ("coverage", "width_mean", "mae"):
            vals = np.array([getattr(r, metric) for r in rs], dtype=float)
            agg[metric + "_mean"] = float(np.mean(vals))
            agg[metric + "_sd"] = float(np.std(vals, ddof=1)) if vals.size > 1 and np.all(np.isfinite(vals)) else (
                math.inf if np.any(np.isinf(vals)) else math.nan
            )
            if metric != "coverage":
                agg[metric + "_ci"] = list(t_interval(vals, conf)) if vals.size > 1 else None
        covered = sum(r.covered for r in rs)
        total = sum(r.n_test for r in rs)
        agg["coverage_ci"] = list(wilson_interval(covered, total, conf))
        agg["covered_pooled"] = covered
        agg["n_test_pooled"] = total
        agg["width_infinite"] = any(r.width_infinite for r in rs)
        out[method] = agg
    return out


@dataclass
class ExperimentReport:
    config: dict
    rows: list
    aggregates: dict
    diagnostics: list
    failures: list
    audit: dict
    metadata: dict
    ablation: list = None
    ablation_summary: dict = None
    seed_results: list = field(default=None, repr=False)

    @property
    def status(self):
        return "partial" if self.failures else "ok"

    def to_dict(self):
        return {
            "format": "claps-report",
            "version": REPORT_VERSION,
            "status": self.status,
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates,
            "diagnostics": self.diagnostics,
            "failures": self.failures,
            "audit": self.audit,
            "metadata": self.metadata,
            "ablation": self.ablation,
            "ablation_summary": self.ablation_summary,
        }


def _metadata(cfg, dataset, started):
    return {
        "package_version": _package_version(),
        "wilson_counts": "pooled over seeds",
        "sd_over": "seeds",
        "spearman_p_method": "t-approximation",
        "rank_rule": "upper k=ceil((m+1)c); centrality lower k=m+1-ceil((m+1)c)",
        "quantile_convention": "nearest-rank",
        "split": asdict(cfg.split),
        "dataset": {"name": dataset.name, "n": len(dataset), "p": int(dataset.x.shape[1]), "meta": dataset.meta},
        "timing": {"started": started, "elapsed_s": None},
    }


def _package_version():
    from . import __version__

    return __version__


def _pool_map(fn, args, workers):
    workers = max(1, min(int(workers), os.cpu_count() or 1, len(args)))
    if workers == 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*args)))


def _seed_worker(cfg, seed, dataset, fixed_test):
    return run_seed(cfg, seed, dataset, fixed_test)


def run_experiment(cfg, workers=1):
    """Run every seed of ``cfg`` and aggregate; seeds may run in ``workers`` processes."""
    t0 = time.perf_counter()
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    dataset, fixed_test = load_dataset(cfg)
    results = _pool_map(_seed_worker, [(cfg, s, dataset, fixed_test) for s in cfg.seeds], workers)
    rows = [r for res in results for r in res.rows]
    meta = _metadata(cfg, dataset, started)
    report = ExperimentReport(
        config=cfg.to_dict(),
        rows=rows,
        aggregates=_aggregate(rows),
        diagnostics=[res.diagnostics for res in results],
        failures=[f for res in results for f in res.failures],
        audit={str(res.seed): res.audit for res in results},
        metadata=meta,
        seed_results=results,
    )
    meta["timing"]["elapsed_s"] = time.perf_counter() - t0
    return report


# --------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    seed: int
    lam: float
    estimator: str
    estimator_used: str
    coverage: float
    width_mean: float
    t: float
    sigma2: float


def ablate_seed(cfg, seed, dataset=None, fixed_test=None, splits=None):
    """One backbone, every ``lam_grid x estimators`` cell refits only the head and calibration."""
    if splits is None:
        if dataset is None:
            dataset, fixed_test = load_dataset(cfg)
        splits = make_splits(cfg, dataset, fixed_test, seed)
    model = train_backbone(cfg, splits, seed)
    phi_tr, phi_cal, phi_te = (backbone.features(model, getattr(splits, n).x) for n in ("train", "cal", "test"))
    rows = []
    for lam in cfg.lam_grid:
        for est in cfg.estimators:
            post = fit_posterior(model, phi_tr, splits.train.y, lam, est)
            cal = conformal.calibrate_claps(llla.predictive(post, phi_cal, model.y_center), splits.cal.y, cfg.target_cov)
            pred = llla.predictive(post, phi_te, model.y_center)
            iv = conformal.claps_interval(pred, cal.threshold, cal.z_threshold)
            rows.append(
                AblationRow(
                    seed, float(lam), est, post.sigma2_estimator,
                    coverage(iv, splits.test.y), mean_width(iv), cal.threshold, post.sigma2,
                )
            )
    return rows


def _trend(values, rel_tol=0.01):
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        return "non-finite"
    d = np.diff(v)
    tol = rel_tol * max(float(np.max(np.abs(v))), 1e-300)
    if np.all(np.abs(d) <= tol):
        return "flat"
    if np.all(d >= -tol):
        return "increasing"
    if np.all(d <= tol):
        return "decreasing"
    return "non-monotone"


def summarize_ablation(rows):
    """Per-cell means over seeds, the coverage spread across cells and the width trend in lambda."""
    cells = {}
    for r in rows:
        cells.setdefault((r.lam, r.estimator), []).append(r)
    table = []
    for (lam, est), rs in sorted(cells.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        table.append({
            "lambda": lam,
            "estimator": est,
            "coverage": float(np.mean([r.coverage for r in rs])),
            "width_mean": float(np.mean([r.width_mean for r in rs])),
            "t": float(np.mean([r.t for r in rs])),
            "sigma2": float(np.mean([r.sigma2 for r in rs])),
            "n_seeds": len(rs),
        })
    covs = [c["coverage"] for c in table]
    trend = {}
    for est in sorted({c["estimator"] for c in table}):
        trend[est] = _trend([c["width_mean"] for c in table if c["estimator"] == est])
    return {"cells": table, "coverage_spread": max(covs) - min(covs), "width_trend_in_lambda": trend}


def _ablate_worker(cfg, seed, dataset, fixed_test):
    return ablate_seed(cfg, seed, dataset, fixed_test)


def run_ablation(cfg, workers=1):
    t0 = time.perf_counter()
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    dataset, fixed_test = load_dataset(cfg)
    per_seed = _pool_map(_ablate_worker, [(cfg, s, dataset, fixed_test) for s in cfg.seeds], workers)
    rows = [r for rs in per_seed for r in rs]
    meta = _metadata(cfg, dataset, started)
    meta["timing"]["elapsed_s"] = time.perf_counter() - t0
    return ExperimentReport(
        config=cfg.to_dict(),
        rows=[],
        aggregates={},
        diagnostics=[],
        failures=[],
        audit={},
        metadata=meta,
        ablation=[asdict(r) for r in rows],
        ablation_summary=summarize_ablation(rows),
    )


# ------------------------------------------------------------------ output


def format_float(x):
    """17 significant digits; non-finite values become the strings ``inf``, ``-inf``, ``nan``."""
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


def dumps(obj, indent=2, _level=0):
    """JSON with every float at 17 significant digits; non-finite floats as strings."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        s = format_float(float(obj))
        return s if math.isfinite(obj) else json.dumps(s)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, float) else v for v in row])


def write_report(report, outdir=None):
    """Write the run directory and return its path."""
    outdir = outdir or report.config["output_dir"]
    run_dir = os.path.join(outdir, report.config["run_name"])
    os.makedirs(run_dir, exist_ok=True)
    write_json(report.to_dict(), os.path.join(run_dir, "report.json"))
    if report.rows:
        header = [f.name for f in fields(MetricsRow)]
        _write_csv(os.path.join(run_dir, "metrics.csv"), header, [[getattr(r, h) for h in header] for r in report.rows])
    if report.diagnostics:
        write_json({"diagnostics": report.diagnostics, "metadata": {
            "spearman_p_method": "t-approximation", "quantile_convention": "nearest-rank",
            "r_threshold_for_P(r<1%)": 0.01,
        }}, os.path.join(run_dir, "diagnostics.json"))
        curves = [
            [d["seed"], p["n"], p["epi_mean"], p["trace_sigma"], p["sigma2"]]
            for d in report.diagnostics for p in d.get("subsample", [])
        ]
        if curves:
            _write_csv(os.path.join(run_dir, "subsample.csv"), ["seed", "n", "epi_mean", "trace_sigma", "sigma2"], curves)
    if report.ablation:
        header = [f.name for f in fields(AblationRow)]
        _write_csv(os.path.join(run_dir, "ablation.csv"), header, [[r[h] for h in header] for r in report.ablation])
    if report.config.get("save_models") and report.seed_results:
        for res in report.seed_results:
            save_model_dir(os.path.join(run_dir, "models", f"seed_{res.seed}"), res, report.config["target_cov"])
    return run_dir


def save_model_dir(path, res, target_cov):
    """Persist what ``score`` and ``diagnose`` need: backbone, posterior, calibration scores, cal/test data."""
    os.makedirs(path, exist_ok=True)
    art = res.artifacts
    backbone.save_checkpoint(art["model"], os.path.join(path, "backbone.json"))
    write_json(art["post"].to_dict(), os.path.join(path, "posterior.json"))
    splits = art["splits"]
    target = splits.train.meta.get("target", "y")
    if "claps_z_scores" in art:
        write_json({
            "method": "claps",
            "target_cov": target_cov,
            "abs_z": np.sort(art["claps_z_scores"]).tolist(),
        }, os.path.join(path, "calibration.json"))
    write_json({
        "feature_names": list(splits.train.feature_names), "target": target, "seed": res.seed,
    }, os.path.join(path, "meta.json"))
    data.write_csv(splits.cal, os.path.join(path, "cal.csv"), target)
    data.write_csv(splits.test, os.path.join(path, "test.csv"), target)
