"""Variance decomposition, heteroscedasticity signal and method selection.

For a fitted Laplace head the predictive variance splits as
``v(x) = sigma2 + epi(x)``. The epistemic share ``r = epi / v`` and the
posterior trace say how much the posterior still carries; the Spearman
correlation between ``|y - mu|`` and ``sqrt(v)`` says whether residual
scale is structured. :func:`select_method` turns the three into a verdict.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from . import linalg, llla
from .exceptions import EmptySplit, GridExceedsData, LengthMismatch, TooFewPoints


@dataclass(frozen=True)
class DecompositionSummary:
    epi_mean: float
    r_mean: float
    r_median: float
    r_q10: float
    r_q90: float
    frac_r_below_1pct: float
    trace_sigma: float
    sigma2: float
    n: int
    split: str = "test"

    def table_row(self):
        """Field names as printed in the variance-decomposition table."""
        return {
            "Split": self.split,
            "Epistemic (mean)": self.epi_mean,
            "r (mean)": self.r_mean,
            "Q0.10(r)": self.r_q10,
            "Q0.90(r)": self.r_q90,
            "P(r<1%)": self.frac_r_below_1pct,
            "tr(Sigma)": self.trace_sigma,
            "sigma2": self.sigma2,
            "r (median)": self.r_median,
            "n": self.n,
        }


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p_value: float
    n: int
    p_method: str = "t-approximation"


@dataclass(frozen=True)
class SelectionThresholds:
    eps_r: float = 0.02
    eps_trace: float = 1.0
    tau_rho: float = 0.2


@dataclass(frozen=True)
class SelectionVerdict:
    choice: str
    median_r: float
    trace: float
    rho: float
    thresholds: SelectionThresholds

    def to_dict(self):
        d = asdict(self)
        d["thresholds"] = asdict(self.thresholds)
        return d


@dataclass(frozen=True)
class SubsamplePoint:
    n: int
    epi_mean: float
    trace_sigma: float
    sigma2: float


def nearest_rank(sorted_values, q):
    """Element at 1-based position ``ceil(q * n)`` of an ascending array (at least the first)."""
    n = len(sorted_values)
    k = max(1, math.ceil(q * n - 1e-12))
    return float(sorted_values[min(k, n) - 1])


def decompose(post, phis, split="test"):
    """Per-point ``(epi, r)`` and their summary on one split.

    Parameters
    ----------
    post : LaplacePosterior
    phis : ndarray of shape (n, d)
        Backbone features of the split.
    split : str
        Label stored on the summary (``calibration`` or ``test``).

    Returns
    -------
    epi, r : ndarray
    summary : DecompositionSummary
    """
    phis = np.atleast_2d(np.asarray(phis, dtype=float))
    if phis.shape[0] == 0:
        raise EmptySplit(f"split {split!r} is empty")
    epi = linalg.quad_form_via_chol(post.chol_precision, phis)
    r = epi / (post.sigma2 + epi)
    r_sorted = np.sort(r)
    summary = DecompositionSummary(
        epi_mean=float(np.mean(epi)),
        r_mean=float(np.mean(r)),
        r_median=nearest_rank(r_sorted, 0.5),
        r_q10=nearest_rank(r_sorted, 0.1),
        r_q90=nearest_rank(r_sorted, 0.9),
        frac_r_below_1pct=float(np.mean(r < 0.01)),
        trace_sigma=llla.trace_sigma(post),
        sigma2=float(post.sigma2),
        n=int(phis.shape[0]),
        split=split,
    )
    return epi, r, summary


def spearman(abs_err, pred_scale):
    """Midrank Spearman correlation with a two-sided t-approximation p-value.

    A constant input has no ranking information; it yields ``rho = 0`` and
    ``p = 1`` rather than NaN.
    """
    a = np.asarray(abs_err, dtype=float).ravel()
    b = np.asarray(pred_scale, dtype=float).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"lengths differ: {a.size} vs {b.size}")
    n = a.size
    if n < 3:
        raise TooFewPoints(f"need at least 3 points, got {n}")
    ra = stats.rankdata(a) - (n + 1) / 2.0
    rb = stats.rankdata(b) - (n + 1) / 2.0
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        return SpearmanResult(0.0, 1.0, n)
    rho = float(np.clip((ra @ rb) / denom, -1.0, 1.0))
    if abs(rho) >= 1.0:
        return SpearmanResult(rho, 0.0, n)
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return SpearmanResult(rho, min(max(p, 0.0), 1.0), n)


def select_method(summary, sp, thresholds=SelectionThresholds()):
    """Apply the epistemic-share / trace / Spearman selection rule.

    ``claps`` when the median share exceeds ``eps_r``, the trace exceeds
    ``eps_trace`` and ``rho <= tau_rho``; ``scale_learning`` when the median
    share is at most ``eps_r`` and ``rho > tau_rho``; otherwise
    ``inconclusive``.
    """
    med, trace, rho = summary.r_median, summary.trace_sigma, sp.rho
    th = thresholds
    if med > th.eps_r and trace > th.eps_trace and rho <= th.tau_rho:
        choice = "claps"
    elif med <= th.eps_r and rho > th.tau_rho:
        choice = "scale_learning"
    else:
        choice = "inconclusive"
    return SelectionVerdict(choice, float(med), float(trace), float(rho), th)


def default_grid(n_train, points=5):
    """Geometric grid from ``max(50, 5% of n_train)`` to ``n_train``."""
    lo = min(max(50, math.ceil(0.05 * n_train)), n_train)
    grid = np.unique(np.round(np.geomspace(lo, n_train, points)).astype(int))
    return [int(g) for g in grid]


def subsample_curves(phi_train, y_centered, grid, phi_eval, lam=1.0, estimator="residual", seed=0):
    """Refit the Laplace head on growing prefixes of a seeded shuffle of the training rows.

    The backbone (hence ``phi``) stays fixed; for each ``n`` in ``grid``
    the head is refit on the first ``n`` shuffled rows and the mean
    epistemic variance on ``phi_eval``, ``tr(Sigma)`` and ``sigma2`` are
    recorded.
    """
    phi_train = np.atleast_2d(np.asarray(phi_train, dtype=float))
    y = np.asarray(y_centered, dtype=float).ravel()
    grid = [int(g) for g in grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be ascending")
    if not grid or grid[0] < 1 or grid[-1] > phi_train.shape[0]:
        raise GridExceedsData(f"grid {grid} is not within [1, {phi_train.shape[0]}]")
    order = np.random.default_rng(seed).permutation(phi_train.shape[0])
    out = []
    for n in grid:
        idx = order[:n]
        post = llla.fit_llla(phi_train[idx], y[idx], lam, estimator)
        epi = linalg.quad_form_via_chol(post.chol_precision, np.atleast_2d(phi_eval))
        out.append(SubsamplePoint(n, float(np.mean(epi)), llla.trace_sigma(post), post.sigma2))
    return out
