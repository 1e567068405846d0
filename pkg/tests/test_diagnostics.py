import math

import numpy as np
import pytest
from scipy import stats

from claps import diagnostics, linalg, llla
from claps.diagnostics import SelectionThresholds, SpearmanResult
from claps.exceptions import EmptySplit, GridExceedsData, LengthMismatch, TooFewPoints


def midrank_oracle(v):
    """Average ranks by direct counting: rank = #less + (#equal + 1) / 2."""
    v = list(v)
    return [sum(u < a for u in v) + (sum(u == a for u in v) + 1) / 2 for a in v]


def pearson_oracle(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def make_post(rng, d=4, n=60):
    phi = rng.normal(size=(n, d))
    return llla.fit_llla(phi, phi @ rng.normal(size=d) + rng.normal(size=n), 1.0), phi


class TestDecompose:
    def test_zero_features(self, rng):
        post, _ = make_post(rng)
        epi, r, s = diagnostics.decompose(post, np.zeros((5, 4)))
        assert np.all(epi == 0) and np.all(r == 0)
        assert s.frac_r_below_1pct == 1.0 and s.r_q10 == s.r_q90 == 0.0

    def test_share_one_half(self):
        post = llla.LaplacePosterior(np.zeros(1), linalg.cholesky(np.array([[0.25]])), 0.25, 4.0, 0, "residual")
        _, r, s = diagnostics.decompose(post, np.array([[1.0]]))
        assert r[0] == 0.5 and s.r_mean == 0.5 and s.n == 1

    def test_against_explicit_sigma(self, rng):
        post, phi = make_post(rng)
        x = rng.normal(size=(37, 4))
        epi, r, s = diagnostics.decompose(post, x, "calibration")
        sigma = np.linalg.inv(linalg.precision_matrix(phi, 1.0, post.sigma2))
        epi_ref = np.array([p @ sigma @ p for p in x])
        r_ref = np.sort(epi_ref / (post.sigma2 + epi_ref))
        np.testing.assert_allclose(epi, epi_ref, rtol=1e-8)
        assert s.epi_mean == pytest.approx(epi_ref.mean(), rel=1e-8)
        assert s.r_q10 == pytest.approx(r_ref[math.ceil(0.1 * 37) - 1], rel=1e-8)
        assert s.r_q90 == pytest.approx(r_ref[math.ceil(0.9 * 37) - 1], rel=1e-8)
        assert s.r_median == pytest.approx(r_ref[math.ceil(0.5 * 37) - 1], rel=1e-8)
        assert s.trace_sigma == pytest.approx(np.trace(sigma), rel=1e-8)
        assert s.split == "calibration"
        assert 0 <= s.r_q10 <= s.r_q90 < 1

    def test_empty(self, rng):
        post, _ = make_post(rng)
        with pytest.raises(EmptySplit):
            diagnostics.decompose(post, np.empty((0, 4)))

    def test_table_columns(self, rng):
        post, phi = make_post(rng)
        row = diagnostics.decompose(post, phi)[2].table_row()
        for col in ("Epistemic (mean)", "r (mean)", "Q0.10(r)", "Q0.90(r)", "P(r<1%)", "tr(Sigma)", "sigma2"):
            assert col in row

    def test_calibration_and_test_agree(self):
        rng = np.random.default_rng(5)
        post, _ = make_post(rng, d=8, n=500)
        a = diagnostics.decompose(post, rng.normal(size=(1500, 8)), "calibration")[2]
        b = diagnostics.decompose(post, rng.normal(size=(1500, 8)), "test")[2]
        assert abs(a.epi_mean - b.epi_mean) / b.epi_mean < 0.2


class TestSpearman:
    def test_perfect(self):
        assert diagnostics.spearman([1, 2, 3], [1, 2, 3]) == SpearmanResult(1.0, 0.0, 3)
        assert diagnostics.spearman([1, 2, 3], [3, 2, 1]) == SpearmanResult(-1.0, 0.0, 3)

    def test_ties_match_brute_force(self, rng):
        for _ in range(20):
            n = int(rng.integers(3, 40))
            a = rng.integers(0, 5, n).astype(float)
            b = rng.integers(0, 4, n).astype(float)
            if len(set(a)) == 1 or len(set(b)) == 1:
                continue
            ref = pearson_oracle(midrank_oracle(a), midrank_oracle(b))
            assert diagnostics.spearman(a, b).rho == pytest.approx(ref, abs=1e-12)

    def test_p_value_formula(self, rng):
        a, b = rng.normal(size=50), rng.normal(size=50)
        res = diagnostics.spearman(a, b)
        t = res.rho * math.sqrt(48 / (1 - res.rho**2))
        assert res.p_value == pytest.approx(2 * stats.t.sf(abs(t), 48), rel=1e-12)
        assert res.rho == pytest.approx(stats.spearmanr(a, b)[0], abs=1e-12)

    def test_monotone_invariance(self, rng):
        a, b = rng.normal(size=80), rng.normal(size=80)
        base = diagnostics.spearman(a, b)
        moved = diagnostics.spearman(np.exp(a), b**3 + 2 * b)
        assert moved.rho == pytest.approx(base.rho, abs=1e-12)

    def test_constant_input(self):
        assert diagnostics.spearman([1, 1, 1, 1], [1, 2, 3, 4]) == SpearmanResult(0.0, 1.0, 4)

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            diagnostics.spearman([1, 2, 3], [1, 2])
        with pytest.raises(TooFewPoints):
            diagnostics.spearman([1, 2], [1, 2])


def summary(median_r, trace):
    return diagnostics.DecompositionSummary(0.0, median_r, median_r, 0.0, 1.0, 0.0, trace, 1.0, 10)


class TestSelect:
    def test_epistemic_regime(self):
        v = diagnostics.select_method(summary(0.08, 33.0), SpearmanResult(0.01, 0.5, 100))
        assert v.choice == "claps"

    def test_scale_regime(self):
        v = diagnostics.select_method(summary(0.0005, 0.01), SpearmanResult(0.25, 0.0, 100))
        assert v.choice == "scale_learning"

    def test_inconclusive(self):
        v = diagnostics.select_method(summary(0.0005, 0.01), SpearmanResult(0.05, 0.1, 100))
        assert v.choice == "inconclusive"

    def test_thresholds_are_configurable_and_recorded(self):
        th = SelectionThresholds(eps_r=0.1, eps_trace=1.0, tau_rho=0.2)
        v = diagnostics.select_method(summary(0.08, 33.0), SpearmanResult(0.01, 0.5, 100), th)
        assert v.choice == "inconclusive" and v.thresholds == th
        assert v.to_dict()["thresholds"]["eps_r"] == 0.1
        again = diagnostics.select_method(summary(0.08, 33.0), SpearmanResult(0.01, 0.5, 100), th)
        assert again == v


class TestSubsample:
    def test_default_grid(self):
        assert diagnostics.default_grid(10000) == [500, 1057, 2236, 4729, 10000]
        assert diagnostics.default_grid(60) == [50, 52, 55, 57, 60]
        assert diagnostics.default_grid(30) == [30]

    def test_full_grid_matches_full_fit(self, rng):
        post, phi = make_post(rng, n=80)
        y = phi @ np.ones(4) + rng.normal(size=80)
        x = rng.normal(size=(20, 4))
        (pt,) = diagnostics.subsample_curves(phi, y, [80], x)
        full = llla.fit_llla(phi, y, 1.0)
        assert pt.n == 80
        assert pt.sigma2 == pytest.approx(full.sigma2, rel=1e-10)
        assert pt.trace_sigma == pytest.approx(llla.trace_sigma(full), rel=1e-10)
        assert pt.epi_mean == pytest.approx(np.mean(llla.predictive(full, x).epi), rel=1e-10)

    def test_contraction_and_stable_noise(self):
        rng = np.random.default_rng(8)
        phi = rng.normal(size=(5000, 6))
        y = phi @ rng.normal(size=6) + 0.5 * rng.normal(size=5000)
        pts = diagnostics.subsample_curves(phi, y, [50, 158, 500, 1581, 5000], rng.normal(size=(300, 6)))
        epi = [p.epi_mean for p in pts]
        assert all(b < a for a, b in zip(epi, epi[1:]))
        s2 = np.array([p.sigma2 for p in pts])
        assert np.all(np.abs(s2 / s2[-1] - 1) < 0.2)

    def test_errors(self, rng):
        phi = rng.normal(size=(10, 2))
        with pytest.raises(GridExceedsData):
            diagnostics.subsample_curves(phi, np.zeros(10), [5, 11], phi)
        with pytest.raises(ValueError):
            diagnostics.subsample_curves(phi, np.zeros(10), [8, 5], phi)
