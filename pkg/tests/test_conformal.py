import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from claps import conformal
from claps.exceptions import EmptyCalibration, NegativeQ, NonpositiveScale
from claps.llla import PredictiveGaussian


def gauss(mu, v):
    return PredictiveGaussian(mu=mu, v=v, epi=0.0)


class TestScores:
    @pytest.mark.parametrize(
        "mu,v,y,expected,tol",
        [(0, 1, 0, 0.5, 0), (0, 1, 1.6449, 0.05, 1e-4), (2, 4, 2, 0.5, 0), (0, 1, -1.2816, 0.10, 1e-4)],
    )
    def test_centrality(self, mu, v, y, expected, tol):
        assert conformal.centrality_score(gauss(mu, v), y) == pytest.approx(expected, abs=tol)

    def test_centrality_is_min_of_cdf_tails(self, rng):
        mu, v = rng.normal(size=50), rng.uniform(0.1, 4, 50)
        y = rng.normal(size=50) * 3
        z = (y - mu) / np.sqrt(v)
        ref = np.minimum(stats.norm.cdf(z), 1 - stats.norm.cdf(z))
        np.testing.assert_allclose(conformal.centrality_score(gauss(mu, v), y), ref, atol=1e-12)

    @pytest.mark.parametrize("mu,y,expected", [(0, 3, 3), (5, 5, 0), (-2, 1, 3)])
    def test_abs_residual(self, mu, y, expected):
        assert conformal.abs_residual_score(mu, y) == expected

    @pytest.mark.parametrize("mu,h,y,expected", [(0, 2, 4, 2), (0, 0.5, 1, 2)])
    def test_normalized(self, mu, h, y, expected):
        assert conformal.normalized_score(mu, h, y) == expected

    def test_normalized_zero_scale(self):
        with pytest.raises(NonpositiveScale):
            conformal.normalized_score(0, 0, 1)

    @pytest.mark.parametrize("lo,hi,y,expected", [(0, 2, 1, 0), (0, 1, 3, 2), (0, 1, -3, 3), (1, 0, 0.5, 0.5)])
    def test_cqr(self, lo, hi, y, expected):
        assert conformal.cqr_score(lo, hi, y) == expected


class TestRankRules:
    def test_lower_m9(self):
        t, k = conformal.rank_threshold_lower(np.arange(1, 10) / 100, 0.9)
        assert (k, t) == (1, 0.01)

    def test_lower_m19_second_smallest(self, rng):
        s = rng.permutation(np.linspace(0.01, 0.4, 19))
        t, k = conformal.rank_threshold_lower(s, 0.9)
        assert k == 2 and t == np.sort(s)[1]

    def test_lower_too_few_points_gives_whole_line(self):
        # one score cannot certify 0.99; a finite threshold would accept with probability 1/2
        assert conformal.rank_threshold_lower([0.3], 0.99) == (0.0, 0)
        assert conformal.rank_threshold_lower([0.1, 0.2, 0.3], 0.999) == (0.0, 0)

    def test_upper_examples(self):
        assert conformal.rank_threshold_upper(np.arange(1, 10), 0.9) == (9.0, 9)
        q, k = conformal.rank_threshold_upper(np.arange(1, 5), 0.9)
        assert math.isinf(q) and k == 5
        assert conformal.rank_threshold_upper(np.arange(1, 20), 0.9) == (18.0, 18)

    def test_float_representation_of_rank(self):
        # 1000 * 0.9 evaluates to 900.0000000000001
        assert conformal.upper_rank(999, 0.9) == 900
        assert conformal.lower_rank(999, 0.9) == 100

    def test_empty(self):
        with pytest.raises(EmptyCalibration):
            conformal.rank_threshold_lower([], 0.9)
        with pytest.raises(EmptyCalibration):
            conformal.rank_threshold_upper([], 0.9)

    @pytest.mark.parametrize("c", [0.0, 1.0, -0.1, 1.5])
    def test_target_out_of_range(self, c):
        with pytest.raises(ValueError):
            conformal.rank_threshold_upper([1.0, 2.0], c)

    def test_ties_share_rank(self):
        t, k = conformal.rank_threshold_lower([0.2, 0.1, 0.1, 0.1, 0.3, 0.4, 0.5, 0.6, 0.7], 0.8)
        assert k == 2 and t == 0.1

    def test_calibrate_dispatch(self):
        res = conformal.calibrate("claps", np.arange(1, 10) / 100, 0.9)
        assert (res.threshold, res.rank_k, res.m, res.method) == (0.01, 1, 9, "claps")
        assert not res.infinite
        res = conformal.calibrate("cqr", [1.0, 2.0], 0.9)
        assert res.infinite
        with pytest.raises(ValueError):
            conformal.calibrate("jackknife", [1.0], 0.9)


def acceptance_by_enumeration(m, k):
    """P(s* >= s_(k)) over all equally likely orderings of m + 1 distinct scores."""
    accepted = 0
    total = 0
    for perm in itertools.permutations(range(m + 1)):
        cal, test = perm[:m], perm[m]
        kth = sorted(cal)[k - 1]
        accepted += test >= kth
        total += 1
    return Fraction(accepted, total)


class TestExactCoverage:
    @pytest.mark.parametrize("m", range(1, 7))
    def test_enumeration_matches_closed_form(self, m):
        for k in range(1, m + 1):
            assert acceptance_by_enumeration(m, k) == Fraction(m + 1 - k, m + 1)

    @pytest.mark.parametrize("m", range(1, 7))
    def test_lower_rule_never_undercovers(self, m):
        for c in (0.5, 0.6, 0.75, 0.8, 0.9, 0.95):
            k = conformal.lower_rank(m, c)
            p = Fraction(1) if k == 0 else acceptance_by_enumeration(m, k)
            assert p >= Fraction(c).limit_denominator(1000)

    def test_monte_carlo_m99(self):
        rng = np.random.default_rng(2024)
        m, trials, c = 99, 100_000, 0.9
        k = conformal.lower_rank(m, c)
        scores = rng.random((trials, m + 1))
        kth = np.partition(scores[:, :m], k - 1, axis=1)[:, k - 1]
        hit = np.mean(scores[:, m] >= kth)
        p = (m + 1 - k) / (m + 1)
        se = math.sqrt(p * (1 - p) / trials)
        assert abs(hit - p) < 3 * se
        assert p >= c


class TestIntervals:
    def test_claps_standard(self):
        iv = conformal.claps_interval(gauss(0.0, 1.0), 0.05)
        assert iv.lo == pytest.approx(-1.6449, abs=1e-3) and iv.hi == pytest.approx(1.6449, abs=1e-3)

    def test_claps_half(self):
        iv = conformal.claps_interval(gauss(3.0, 2.0), 0.5)
        assert iv.lo == iv.hi == 3.0

    def test_claps_zero(self):
        iv = conformal.claps_interval(gauss(3.0, 2.0), 0.0)
        assert iv.lo == -math.inf and iv.hi == math.inf

    def test_claps_batch_and_z_path(self, rng):
        pred = gauss(rng.normal(size=5), rng.uniform(0.5, 2, 5))
        a = conformal.claps_interval(pred, 0.1)
        b = conformal.claps_interval(pred, 0.1, z_threshold=float(stats.norm.ppf(0.9)))
        np.testing.assert_allclose(a.lo, b.lo, rtol=1e-12)
        np.testing.assert_allclose(a.hi, b.hi, rtol=1e-12)

    def test_claps_bad_t(self):
        with pytest.raises(ValueError):
            conformal.claps_interval(gauss(0, 1), 0.6)

    def test_residual(self):
        assert conformal.residual_interval(0.0, 2.0) == conformal.Interval(-2.0, 2.0)
        assert conformal.residual_interval(1.5, 0.0) == conformal.Interval(1.5, 1.5)
        assert conformal.residual_interval(1.5, math.inf) == conformal.Interval(-math.inf, math.inf)
        with pytest.raises(NegativeQ):
            conformal.residual_interval(0.0, -1.0)

    def test_normcp(self):
        assert conformal.normcp_interval(0.0, 2.0, 1.0) == conformal.Interval(-2.0, 2.0)
        assert conformal.normcp_interval(0.0, 4.0, 1.0).width == 2 * conformal.normcp_interval(0.0, 2.0, 1.0).width
        assert conformal.normcp_interval(1.0, 2.0, 0.0) == conformal.Interval(1.0, 1.0)
        with pytest.raises(NonpositiveScale):
            conformal.normcp_interval(0.0, 0.0, 1.0)

    def test_cqr(self):
        assert conformal.cqr_interval(0.0, 1.0, 0.5) == conformal.Interval(-0.5, 1.5)
        assert conformal.cqr_interval(0.0, 1.0, 0.0) == conformal.Interval(0.0, 1.0)
        iv, n = conformal.cqr_interval(1.0, 0.0, 0.2, return_clamped=True)
        assert iv == conformal.Interval(0.5, 0.5) and n == 1
        with pytest.raises(NegativeQ):
            conformal.cqr_interval(0.0, 1.0, -0.1)

    def test_cqr_clamp_counts_rows(self):
        iv, n = conformal.cqr_interval(np.array([0.0, 2.0, 1.0]), np.array([1.0, 0.0, 0.9]), 0.1, return_clamped=True)
        assert n == 1
        assert iv.lo[1] == iv.hi[1] == 1.0


class TestClapsCalibration:
    def test_z_calibration_matches_score_calibration(self, rng):
        for m in (1, 9, 50, 999):
            for c in (0.5, 0.8, 0.9, 0.95):
                pred = gauss(rng.normal(size=m), rng.uniform(0.2, 3.0, m))
                y = rng.normal(size=m) * 2
                by_z = conformal.calibrate_claps(pred, y, c)
                by_s = conformal.calibrate("claps", conformal.centrality_score(pred, y), c)
                assert by_z.rank_k == by_s.rank_k
                assert by_z.threshold == pytest.approx(by_s.threshold, rel=1e-12, abs=0)

    def test_z_calibration_survives_underflow(self):
        pred = gauss(np.zeros(9), np.ones(9))
        y = np.arange(41.0, 50.0)  # centrality scores underflow to 0
        assert np.all(conformal.centrality_score(pred, y) == 0)
        res = conformal.calibrate_claps(pred, y, 0.9)
        assert res.z_threshold == 49.0
        iv = conformal.claps_interval(gauss(0.0, 1.0), res.threshold, res.z_threshold)
        assert iv.hi == 49.0


class TestDuality:
    def test_membership_iff_score_at_least_t(self, rng):
        mu, v = rng.normal(size=2000), rng.uniform(0.1, 5, 2000)
        y = mu + np.sqrt(v) * rng.normal(size=2000) * 2
        pred = gauss(mu, v)
        s = conformal.centrality_score(pred, y)
        for t in (0.01, 0.05, 0.2, 0.4):
            inside = conformal.claps_interval(pred, t).contains(y)
            clear = np.abs(s - t) > 1e-9
            np.testing.assert_array_equal(inside[clear], (s >= t)[clear])

    def test_nesting_and_width_monotone_in_coverage(self, rng):
        pred = gauss(rng.normal(size=30), rng.uniform(0.1, 5, 30))
        prev = None
        for t in (0.0, 0.01, 0.05, 0.2, 0.5):
            iv = conformal.claps_interval(pred, t)
            if prev is not None:
                assert np.all(iv.lo >= prev.lo) and np.all(iv.hi <= prev.hi)
            prev = iv
