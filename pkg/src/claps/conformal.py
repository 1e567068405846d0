"""Conformity scores, split-conformal thresholds and interval construction.

Four methods share this module:

* ``claps`` scores the two-sided posterior CDF centrality
  ``min(F(y), 1 - F(y))`` and accepts large scores (lower-tail threshold).
* ``baseline_cp``, ``norm_cp`` and ``cqr`` score residual-type
  nonconformity and accept small scores (upper-tail threshold).

Thresholds are order statistics of the calibration scores (stable ascending
sort, ties share a rank). For ``m`` calibration scores and target coverage
``c`` the upper rule uses rank ``k = ceil((m+1) c)``; the lower rule is its
mirror image, ``k = m + 1 - ceil((m+1) c)``. Either way a new exchangeable
score is accepted with probability at least ``c``. When the calibration set
is too small to certify ``c`` the interval is the whole real line.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .exceptions import EmptyCalibration, NegativeQ, NonpositiveScale

log = logging.getLogger(__name__)

METHODS = ("claps", "baseline_cp", "norm_cp", "cqr")
# (m+1)*c is formed in floating point; absorb representation error so that
# e.g. 1000 * 0.9 = 900.0000000000001 still gives rank 900.
_RANK_EPS = 1e-9


@dataclass(frozen=True)
class CalibrationResult:
    method: str
    threshold: float
    m: int
    target_cov: float
    rank_k: int
    z_threshold: float = None

    @property
    def infinite(self):
        if self.method == "claps":
            return self.threshold <= 0.0
        return math.isinf(self.threshold)


@dataclass(frozen=True)
class Interval:
    """Closed interval ``[lo, hi]``; bounds may be infinite or arrays."""

    lo: object
    hi: object

    @property
    def width(self):
        return np.asarray(self.hi) - np.asarray(self.lo)

    def contains(self, y):
        return (np.asarray(self.lo) <= y) & (y <= np.asarray(self.hi))


def centrality_score(pred, y):
    """``min(Phi(z), 1 - Phi(z))`` with ``z = (y - mu) / sqrt(v)``.

    Evaluated as ``Phi(-|z|)``, which is exact in the tails.
    """
    z = (np.asarray(y, dtype=float) - pred.mu) / np.sqrt(pred.v)
    s = ndtr(-np.abs(z))
    return float(s) if np.ndim(s) == 0 else s


def abs_residual_score(mu, y):
    s = np.abs(np.asarray(y, dtype=float) - mu)
    return float(s) if np.ndim(s) == 0 else s


def normalized_score(mu, h, y):
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0):
        raise NonpositiveScale("scale must be strictly positive")
    s = np.abs(np.asarray(y, dtype=float) - mu) / h
    return float(s) if np.ndim(s) == 0 else s


def cqr_score(q_lo, q_hi, y):
    """``max(q_lo - y, y - q_hi, 0)``; crossed quantiles are tolerated."""
    y = np.asarray(y, dtype=float)
    s = np.maximum(np.maximum(np.asarray(q_lo) - y, y - np.asarray(q_hi)), 0.0)
    return float(s) if np.ndim(s) == 0 else s


def _sorted_scores(scores):
    s = np.asarray(scores, dtype=float).ravel()
    if s.size == 0:
        raise EmptyCalibration("no calibration scores")
    return np.sort(s, kind="stable")


def _check_cov(target_cov):
    if not 0 < target_cov < 1:
        raise ValueError(f"target_cov must lie in (0, 1), got {target_cov}")


def upper_rank(m, target_cov):
    """Rank ``ceil((m+1) c)`` used for residual-type scores."""
    return math.ceil((m + 1) * target_cov - _RANK_EPS)


def lower_rank(m, target_cov):
    """Rank ``m + 1 - ceil((m+1) c)`` used for the centrality score; 0 means no finite threshold."""
    return m + 1 - upper_rank(m, target_cov)


def rank_threshold_lower(scores, target_cov):
    """Lower-tail threshold ``t = s_(k)`` for scores where larger means more typical.

    Returns ``(t, k)``. If ``k == 0`` the calibration set cannot certify the
    target and ``t = 0`` (every ``y`` is accepted).
    """
    _check_cov(target_cov)
    s = _sorted_scores(scores)
    k = lower_rank(s.size, target_cov)
    if k < 1:
        return 0.0, 0
    return float(s[k - 1]), k


def rank_threshold_upper(scores, target_cov):
    """Upper-tail threshold ``q = s_(k)``, ``k = ceil((m+1) c)``; ``q = inf`` when ``k > m``."""
    _check_cov(target_cov)
    s = _sorted_scores(scores)
    k = upper_rank(s.size, target_cov)
    if k > s.size:
        return math.inf, k
    return float(s[k - 1]), k


def calibrate(method, scores, target_cov):
    """Threshold calibration scores for ``method``; returns a :class:`CalibrationResult`."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    rule = rank_threshold_lower if method == "claps" else rank_threshold_upper
    threshold, k = rule(scores, target_cov)
    return CalibrationResult(method, threshold, int(np.size(scores)), float(target_cov), int(k))


def standardized_residual(pred, y):
    """``|y - mu| / sqrt(v)``; the centrality score is ``Phi(-|z|)``, a decreasing map of it."""
    z = np.abs(np.asarray(y, dtype=float) - pred.mu) / np.sqrt(pred.v)
    return float(z) if np.ndim(z) == 0 else z


def calibrate_claps(pred, y, target_cov):
    """CLAPS calibration done on ``|z|`` instead of ``Phi(-|z|)``.

    The two orderings are the same, so the accepted set is identical, but
    ``|z|`` keeps full precision where ``Phi(-|z|)`` underflows (``|z|`` above
    about 38, common when the noise estimate is small). The result carries
    both ``t`` and the matching ``z_threshold``; pass the latter to
    :func:`claps_interval`.
    """
    return calibrate_claps_z(standardized_residual(pred, y), target_cov)


def calibrate_claps_z(abs_z, target_cov):
    """:func:`calibrate_claps` from precomputed ``|z|`` calibration values."""
    _check_cov(target_cov)
    z = _sorted_scores(abs_z)
    m = z.size
    k_up = upper_rank(m, target_cov)
    zq = math.inf if k_up > m else float(z[k_up - 1])
    t = 0.0 if math.isinf(zq) else float(ndtr(-zq))
    return CalibrationResult("claps", t, m, float(target_cov), m + 1 - k_up, zq)


def claps_interval(pred, t, z_threshold=None):
    """Central interval ``mu + sqrt(v) * [Phi^{-1}(t), Phi^{-1}(1-t)]``.

    ``t = 0`` gives the whole line, ``t = 0.5`` the point ``[mu, mu]``.
    When ``z_threshold`` is given it is used as the half-width multiplier
    directly (``-Phi^{-1}(t)``), which avoids the round trip through ``t``.
    """
    if z_threshold is not None:
        if z_threshold < 0:
            raise NegativeQ(f"z threshold must be nonnegative, got {z_threshold}")
        half = z_threshold
    elif not 0.0 <= t <= 0.5:
        raise ValueError(f"t must lie in [0, 0.5], got {t}")
    else:
        half = -ndtri(t) if t > 0 else math.inf
    sd = np.sqrt(pred.v)
    if math.isinf(half):
        lo = np.full(np.shape(pred.mu), -math.inf)
        hi = np.full(np.shape(pred.mu), math.inf)
    else:
        lo = pred.mu - sd * half
        hi = pred.mu + sd * half
    return _pack(lo, hi)


def _pack(lo, hi):
    if np.ndim(lo) == 0:
        return Interval(float(lo), float(hi))
    return Interval(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))


def _check_q(q):
    if q < 0:
        raise NegativeQ(f"threshold must be nonnegative, got {q}")


def residual_interval(mu, q):
    """``[mu - q, mu + q]``."""
    _check_q(q)
    mu = np.asarray(mu, dtype=float)
    if math.isinf(q):
        return _pack(np.full(mu.shape, -math.inf), np.full(mu.shape, math.inf))
    return _pack(mu - q, mu + q)


def normcp_interval(mu, h, q):
    """``[mu - q h, mu + q h]`` for a positive scale ``h``."""
    _check_q(q)
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0):
        raise NonpositiveScale("scale must be strictly positive")
    mu = np.asarray(mu, dtype=float)
    if math.isinf(q):
        return _pack(np.full(mu.shape, -math.inf), np.full(mu.shape, math.inf))
    return _pack(mu - q * h, mu + q * h)


def cqr_interval(q_lo, q_hi, q, return_clamped=False):
    """``[q_lo - q, q_hi + q]``.

    If crossed quantile heads leave ``lo > hi`` the interval is replaced by
    the degenerate point at the midpoint; the number of such rows is logged
    and optionally returned.
    """
    _check_q(q)
    q_lo = np.asarray(q_lo, dtype=float)
    q_hi = np.asarray(q_hi, dtype=float)
    if math.isinf(q):
        out = _pack(np.full(q_lo.shape, -math.inf), np.full(q_lo.shape, math.inf))
        return (out, 0) if return_clamped else out
    lo = q_lo - q
    hi = q_hi + q
    crossed = lo > hi
    n_clamped = int(np.count_nonzero(crossed))
    if n_clamped:
        mid = 0.5 * (lo + hi)
        lo = np.where(crossed, mid, lo)
        hi = np.where(crossed, mid, hi)
        log.warning("cqr: %d interval(s) clamped to midpoint (crossed quantile heads)", n_clamped)
    out = _pack(lo, hi)
    return (out, n_clamped) if return_clamped else out
