import math

import numpy as np
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from claps import conformal, diagnostics, evaluation, linalg, llla
from claps.llla import PredictiveGaussian

finite = st.floats(-1e3, 1e3, allow_nan=False)
pos = st.floats(1e-3, 1e3, allow_nan=False)
cov = st.floats(0.01, 0.99)


@given(mu=finite, v=pos, u1=st.floats(0, 8), u2=st.floats(0, 8))
def test_centrality_strictly_decreasing_in_abs_z(mu, v, u1, u2):
    assume(abs(u1 - u2) > 1e-6)
    pred = PredictiveGaussian(mu, v, 0.0)
    s1 = conformal.centrality_score(pred, mu + u1 * math.sqrt(v))
    s2 = conformal.centrality_score(pred, mu - u2 * math.sqrt(v))
    assert (s1 > s2) == (u1 < u2)
    assert 0 <= s1 <= 0.5


@given(mu=finite, v=pos, y=finite, t=st.floats(1e-6, 0.5))
def test_membership_duality(mu, v, y, t):
    pred = PredictiveGaussian(mu, v, 0.0)
    s = conformal.centrality_score(pred, y)
    assume(abs(s - t) > 1e-9)
    assert bool(conformal.claps_interval(pred, t).contains(y)) == (s >= t)


@given(mu=finite, v=pos, t1=st.floats(0, 0.5), t2=st.floats(0, 0.5))
def test_nesting(mu, v, t1, t2):
    lo_t, hi_t = sorted((t1, t2))
    pred = PredictiveGaussian(mu, v, 0.0)
    wide = conformal.claps_interval(pred, lo_t)
    narrow = conformal.claps_interval(pred, hi_t)
    assert wide.lo <= narrow.lo <= narrow.hi <= wide.hi


@given(scores=arrays(float, st.integers(1, 60), elements=st.floats(0, 0.5)), c=cov)
def test_lower_threshold_is_an_order_statistic(scores, c):
    t, k = conformal.rank_threshold_lower(scores, c)
    m = scores.size
    if k == 0:
        assert t == 0.0
        assert m + 1 - conformal.upper_rank(m, c) == 0
    else:
        assert t == np.sort(scores)[k - 1]
        # at least k - 1 calibration points lie strictly below t
        assert np.sum(scores < t) <= k - 1
    # the rank never certifies less than the target
    assert (m + 1 - k) / (m + 1) >= c - 1e-9


@given(scores=arrays(float, st.integers(1, 60), elements=st.floats(0, 100)), c=cov)
def test_upper_threshold_is_an_order_statistic(scores, c):
    q, k = conformal.rank_threshold_upper(scores, c)
    assert k / (scores.size + 1) >= c - 1e-9
    if k > scores.size:
        assert math.isinf(q)
    else:
        assert q == np.sort(scores)[k - 1]


@given(
    a=arrays(np.int64, st.integers(3, 40), elements=st.integers(-100, 100)),
    seed=st.integers(0, 2**31),
)
def test_spearman_rank_invariance_and_bounds(a, seed):
    # integer values keep the transform below strictly increasing in floating point
    a = a.astype(float)
    rng = np.random.default_rng(seed)
    b = rng.normal(size=a.size)
    res = diagnostics.spearman(a, b)
    assert -1 <= res.rho <= 1 and 0 <= res.p_value <= 1
    moved = diagnostics.spearman(np.arctan(a / 50) * 3 + 1, np.exp(b))
    assert abs(moved.rho - res.rho) < 1e-12


@given(d=st.integers(1, 20), seed=st.integers(0, 2**31))
def test_quad_form_and_trace_match_inverse(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    m = a @ a.T + 0.5 * np.eye(d)
    f = linalg.cholesky(m)
    inv = np.linalg.inv(m)
    phi = rng.normal(size=d)
    assert math.isclose(linalg.quad_form_via_chol(f, phi), phi @ inv @ phi, rel_tol=1e-8, abs_tol=1e-300)
    post = llla.LaplacePosterior(np.zeros(d), f, 1.0, 1.0, 0, "residual")
    assert math.isclose(llla.trace_sigma(post), np.trace(inv), rel_tol=1e-8)


@given(n=st.integers(1, 30), d=st.integers(1, 8), seed=st.integers(0, 2**31),
       lam=st.floats(0.01, 100), s2=st.floats(0.01, 100))
def test_ridge_stationarity(n, d, seed, lam, s2):
    rng = np.random.default_rng(seed)
    phi, y = rng.normal(size=(n, d)), rng.normal(size=n) * 5
    w = linalg.ridge_solve(phi, y, lam, s2)
    g = (lam * np.eye(d) + phi.T @ phi / s2) @ w - phi.T @ y / s2
    assert np.max(np.abs(g)) < 1e-8 * (1 + np.max(np.abs(y)))


@given(n=st.integers(1, 5000), frac=st.floats(0, 1), conf=st.floats(0.5, 0.999))
def test_wilson_bounds(n, frac, conf):
    s = int(round(frac * n))
    lo, hi = evaluation.wilson_interval(s, n, conf)
    assert 0 <= lo <= s / n <= hi <= 1


@given(vals=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20))
def test_t_interval_symmetric(vals):
    lo, hi = evaluation.t_interval(vals)
    m = float(np.mean(vals))
    assert lo <= m <= hi
    assert math.isclose(m - lo, hi - m, rel_tol=1e-9, abs_tol=1e-9)


@given(seed=st.integers(0, 2**31), scale=st.floats(0, 10))
def test_epistemic_share_in_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(20, 3))
    post = llla.fit_llla(phi, rng.normal(size=20), 1.0)
    epi, r, _ = diagnostics.decompose(post, rng.normal(size=(15, 3)) * scale)
    assert np.all((r >= 0) & (r < 1))
    np.testing.assert_array_equal(r == 0, epi == 0)
