"""Datasets, deterministic splits, standardization and synthetic generators."""

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NoNumericColumns, TargetMissing, TooSmall

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    name: str
    x: np.ndarray
    y: np.ndarray
    feature_names: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self):
        return self.y.shape[0]

    def subset(self, idx, name=None):
        return Dataset(name or self.name, self.x[idx], self.y[idx], list(self.feature_names), dict(self.meta))


@dataclass(frozen=True)
class Standardizer:
    """Per-column mean/std from the training split; constant columns keep std 1."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std


def fit_standardizer(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = ~(std > 0)
    if np.any(constant):
        log.warning("%d constant feature column(s); their scale is set to 1", int(constant.sum()))
    return Standardizer(mean, np.where(constant, 1.0, std), constant)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    cal_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.cal_frac, self.test_frac)
        if any(f < 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be nonnegative and sum to 1, got {fracs}")


@dataclass
class Splits:
    train: Dataset
    cal: Dataset
    test: Dataset
    standardizer: Standardizer
    indices: dict


def split(ds, spec=SplitSpec(), fixed_test=None):
    """Shuffle with ``spec.seed`` and cut contiguous train/cal/test blocks.

    Calibration and test sizes are ``floor(n * frac)``; the remainder goes to
    training. With ``fixed_test`` (pre-split benchmarks) the given test set
    is used untouched and ``ds`` is divided into train and calibration in
    the ratio ``train_frac : cal_frac``.
    """
    n = len(ds)
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n)
    if fixed_test is None:
        n_cal = math.floor(n * spec.cal_frac)
        n_test = math.floor(n * spec.test_frac)
    else:
        n_cal = math.floor(n * spec.cal_frac / (spec.train_frac + spec.cal_frac))
        n_test = 0
    return _partition(ds, order, n - n_cal - n_test, n_cal, fixed_test)


def split_counts(ds, n_train, n_cal, n_test, seed=0):
    """Like :func:`split` but with exact sizes; rows beyond the three counts are unused."""
    if n_train + n_cal + n_test > len(ds):
        raise TooSmall(f"requested {n_train + n_cal + n_test} rows, dataset has {len(ds)}")
    order = np.random.default_rng(seed).permutation(len(ds))[:n_train + n_cal + n_test]
    return _partition(ds, order, n_train, n_cal, None)


def _partition(ds, order, n_train, n_cal, fixed_test):
    n_test = len(order) - n_train - n_cal if fixed_test is None else len(fixed_test)
    sizes = {"train": n_train, "cal": n_cal, "test": n_test}
    for name, size in sizes.items():
        if size < 1:
            raise TooSmall(f"{name} split would be empty (n={len(ds)}, sizes={sizes})")
    idx = {
        "train": order[:n_train],
        "cal": order[n_train:n_train + n_cal],
        "test": order[n_train + n_cal:],
    }
    train = ds.subset(idx["train"], f"{ds.name}:train")
    cal = ds.subset(idx["cal"], f"{ds.name}:cal")
    test = fixed_test if fixed_test is not None else ds.subset(idx["test"], f"{ds.name}:test")
    return Splits(train, cal, test, fit_standardizer(train.x), idx)


def _parse_float(cell):
    try:
        v = float(cell)
    except (TypeError, ValueError):
        return None
    return v if math.isfinite(v) else None


def load_csv(path, target=-1, delimiter=",", name=None):
    """Read a numeric CSV with a header row.

    ``target`` is a column name or a zero-based index (negative indices
    count from the end); ``None`` reads every column as a feature and
    leaves ``y`` at zero. Rows with any missing or non-numeric cell are
    dropped; the count is logged and stored in ``meta["dropped_rows"]``.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise NoNumericColumns(f"{path}: file is empty") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    if target is None:
        t_idx = None
    elif isinstance(target, str) and target not in header:
        try:
            target = int(target)
        except ValueError:
            raise TargetMissing(f"target column {target!r} not in header {header}") from None
    if target is None:
        pass
    elif isinstance(target, str):
        t_idx = header.index(target)
    else:
        t_idx = int(target)
        if not -len(header) <= t_idx < len(header):
            raise TargetMissing(f"target index {target} out of range for {len(header)} columns")
        t_idx %= len(header)
    if len(header) < (1 if t_idx is None else 2):
        raise NoNumericColumns(f"{path}: need at least one feature column besides the target")

    values, dropped = [], 0
    for r in rows:
        parsed = [_parse_float(c) for c in r] if len(r) == len(header) else [None]
        if any(v is None for v in parsed):
            dropped += 1
            continue
        values.append(parsed)
    if dropped:
        log.warning("%s: dropped %d row(s) with missing or non-numeric cells", path, dropped)
    if not values:
        if rows:
            raise NoNumericColumns(f"{path}: no fully numeric rows")
        arr = np.empty((0, len(header)))
    else:
        arr = np.asarray(values, dtype=float)
    feat_idx = [i for i in range(len(header)) if i != t_idx]
    return Dataset(
        name or os.path.splitext(os.path.basename(path))[0],
        arr[:, feat_idx].reshape(arr.shape[0], len(feat_idx)),
        np.zeros(arr.shape[0]) if t_idx is None else arr[:, t_idx],
        [header[i] for i in feat_idx],
        {
            "source": os.path.abspath(path),
            "target": None if t_idx is None else header[t_idx],
            "dropped_rows": dropped,
        },
    )


def write_csv(ds, path, target_name="y", fmt="%.17g"):
    header = list(ds.feature_names) + [target_name]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xi, yi in zip(ds.x, ds.y):
            w.writerow([fmt % v for v in xi] + [fmt % yi])


def synth_linear_gaussian(n, d, true_w=None, sigma=1.0, seed=0):
    """``x ~ N(0, I_d)``, ``y = x @ w + sigma * eps``.

    When ``true_w`` is omitted it is drawn ``N(0, I)`` from the same seed.
    Generator parameters are kept in ``meta``.
    """
    rng = np.random.default_rng(seed)
    if true_w is None:
        true_w = rng.standard_normal(d)
    true_w = np.asarray(true_w, dtype=float).ravel()
    if true_w.size != d:
        raise ValueError(f"true_w has length {true_w.size}, expected {d}")
    x = rng.standard_normal((n, d))
    y = x @ true_w + sigma * rng.standard_normal(n)
    meta = {"kind": "linear_gaussian", "true_w": true_w.tolist(), "sigma": float(sigma), "seed": int(seed)}
    return Dataset("linear_gaussian", x, y, [f"x{i}" for i in range(d)], meta)


def heteroscedastic_sd(x, base=0.1, slope=0.5):
    return base + slope * np.abs(x)


def synth_heteroscedastic(n, seed=0, base=0.1, slope=0.5):
    """Scalar ``x ~ U(-3, 3)``, ``y = sin(2x) + (base + slope*|x|) * eps``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, size=n)
    y = np.sin(2.0 * x) + heteroscedastic_sd(x, base, slope) * rng.standard_normal(n)
    meta = {"kind": "heteroscedastic", "base": float(base), "slope": float(slope), "seed": int(seed)}
    return Dataset("heteroscedastic", x[:, None], y, ["x"], meta)
