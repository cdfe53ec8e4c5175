import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from resilient_swarm.channel import ChannelParams, RssiSample, sample_rssi
from resilient_swarm.errors import (InsufficientAnchorsError, InvalidParameterError,
                                    SingularGeometryError)
from resilient_swarm.localization import (batch_position_fix, bias_compensate,
                                          build_linear_system, estimate_distance_raw,
                                          hyperbolic_weighting, position_fix,
                                          rssi_position_fix, sigma_d,
                                          squared_range_variance, wls_position)

ANCHORS = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
DISTS = np.array([5.0, math.sqrt(65), math.sqrt(45)])


def exact_sigma_d(s2, beta):
    return math.sqrt(s2) * math.log(10) / (10 * beta)


def test_distance_inversion():
    p = ChannelParams(p_tx=20, pl_d0=40, d0=1, beta=2)
    assert estimate_distance_raw(p.p_tx - p.pl_d0, p) == pytest.approx(p.d0)
    assert estimate_distance_raw(-40.0, p) == pytest.approx(10.0, rel=1e-12)
    for d in (1, 5, 20, 50):
        assert estimate_distance_raw(sample_rssi(d, p), p) == pytest.approx(d, rel=1e-9)


def test_sigma_d():
    assert sigma_d(ChannelParams()) == pytest.approx(0.162804, abs=2e-5)
    assert sigma_d(ChannelParams()) == pytest.approx(exact_sigma_d(2, 2), rel=1e-14)
    assert sigma_d(ChannelParams(sigma2_shadow=0)) == 0
    assert sigma_d(ChannelParams(beta=4)) == pytest.approx(sigma_d(ChannelParams()) / 2)


def test_bias_compensation_values():
    assert bias_compensate(7.3, 10.0, 0.0) == 7.3
    s = exact_sigma_d(2, 2)
    bias = 10.0 - bias_compensate(10.0, 10.0, s)
    mp.mp.dps = 30
    oracle = float(10 * mp.expm1(mp.mpf(s) ** 2 / 2))
    assert bias == pytest.approx(oracle, rel=1e-12)
    assert bias == pytest.approx(0.13341, abs=5e-5)


def test_bias_compensation_clamps():
    out, flags = bias_compensate(np.array([0.001, 5.0]), np.array([10.0, 5.0]), 0.5,
                                 return_flags=True)
    assert out[0] == pytest.approx(0.1) and flags.tolist() == [True, False]
    with pytest.raises(InvalidParameterError):
        bias_compensate(1.0, 0.0, 0.1)


def test_bias_compensation_monte_carlo():
    p = ChannelParams()
    rng = np.random.default_rng(12)
    rx = sample_rssi(np.full(100_000, 10.0), p, rng.standard_normal(100_000) * p.sigma_shadow)
    raw = estimate_distance_raw(rx, p)
    comp = bias_compensate(raw, 10.0, sigma_d(p))
    assert np.mean(raw) == pytest.approx(10.133, abs=0.01)
    assert np.mean(comp) == pytest.approx(10.0, rel=0.02)


def test_linear_system_example():
    prob = build_linear_system(ANCHORS, DISTS)
    assert np.allclose(prob.omega, [[20, 0], [0, 20]])
    assert np.allclose(prob.phi, [60, 80])
    assert prob.M == 3
    assert np.allclose(wls_position(prob), [3, 4], atol=1e-12)


def test_linear_system_needs_enough_anchors():
    with pytest.raises(InsufficientAnchorsError):
        build_linear_system(ANCHORS[:2], DISTS[:2])
    with pytest.raises(InvalidParameterError):
        build_linear_system(ANCHORS, DISTS[:2])


def test_true_position_zeroes_linear_residual():
    rng = np.random.default_rng(9)
    for _ in range(50):
        M = rng.integers(3, 12)
        anchors = rng.uniform(-30, 30, (M, 2))
        p = rng.uniform(-30, 30, 2)
        prob = build_linear_system(anchors, np.linalg.norm(anchors - p, axis=1))
        assert np.allclose(prob.omega @ p - prob.phi, 0, atol=1e-9)


def test_exact_ranges_any_weighting():
    rng = np.random.default_rng(3)
    for _ in range(10):
        G = rng.normal(size=(2, 2))
        W = G @ G.T + 0.1 * np.eye(2)
        assert np.allclose(wls_position(build_linear_system(ANCHORS, DISTS, W)), [3, 4],
                           atol=1e-10)


def test_translation_covariance():
    rng = np.random.default_rng(4)
    anchors = rng.uniform(-20, 20, (6, 2))
    d = rng.uniform(5, 30, 6)
    t = np.array([13.5, -7.25])
    W = hyperbolic_weighting(d, 0.16)
    p1 = wls_position(build_linear_system(anchors, d, W))
    p2 = wls_position(build_linear_system(anchors + t, d, W))
    assert np.allclose(p2, p1 + t, atol=1e-9)


def test_collinear_anchors_are_singular():
    anchors = np.array([[0.0, 0], [1, 0], [2, 0], [3, 0]])
    with pytest.raises(SingularGeometryError):
        wls_position(build_linear_system(anchors, [1, 1, 1, 1]))


def test_weighting_structure():
    s = exact_sigma_d(2, 2)
    V = squared_range_variance(10.0, s)
    mp.mp.dps = 30
    oracle = float(mp.mpf(10) ** 4 * (mp.e ** (8 * mp.mpf(s) ** 2) - mp.e ** (4 * mp.mpf(s) ** 2)))
    assert V == pytest.approx(oracle, rel=1e-12)
    assert V == pytest.approx(1244.06, rel=5e-4)
    W = hyperbolic_weighting(np.full(5, 10.0), s)
    assert np.allclose(W, V * (np.eye(4) + np.ones((4, 4))), rtol=1e-14)
    d = np.array([3.0, 7.0, 12.0, 20.0])
    W = hyperbolic_weighting(d, s)
    Vd = squared_range_variance(d, s)
    assert np.array_equal(W - np.diag(np.diag(W)), Vd[0] * (1 - np.eye(3)))
    assert np.allclose(np.diag(W), Vd[0] + Vd[1:])


def test_weighting_noiseless_fallback():
    W, flag = hyperbolic_weighting([1.0, 2.0, 3.0], 0.0, return_flag=True)
    assert flag and np.array_equal(W, np.eye(2))


def _objective(p, prob):
    e = prob.omega @ p - prob.phi
    return e @ np.linalg.solve(prob.W, e)


def test_wls_matches_derivative_free_minimizer():
    rng = np.random.default_rng(30)
    s = exact_sigma_d(2, 2)
    for _ in range(20):
        M = rng.integers(3, 12)
        anchors = rng.uniform(-25, 25, (M, 2))
        p = rng.uniform(-10, 10, 2)
        d = np.linalg.norm(anchors - p, axis=1) * np.exp(s * rng.standard_normal(M))
        prob = build_linear_system(anchors, d, hyperbolic_weighting(d, s))
        p_cf = wls_position(prob)
        scale = _objective(p_cf, prob) + 1.0
        res = minimize(lambda q: _objective(q, prob) / scale, p_cf + rng.normal(0, 2, 2),
                       method="Nelder-Mead",
                       options=dict(xatol=1e-11, fatol=1e-16, maxiter=20000, maxfev=40000))
        assert np.allclose(res.x, p_cf, atol=1e-6)


def test_position_fix_exact_geometry():
    p = ChannelParams(sigma2_shadow=0.0)
    true = np.array([3.0, 4.0])
    rx = sample_rssi(np.linalg.norm(ANCHORS - true, axis=1), p)
    fix, diag = position_fix(ANCHORS, rx, p)
    assert np.linalg.norm(fix - true) < 1e-3
    assert diag.n_anchors == 3 and diag.condition >= 1


def test_zero_noise_identity_random_geometry():
    p = ChannelParams(sigma2_shadow=0.0)
    rng = np.random.default_rng(6)
    for _ in range(200):
        M = rng.integers(3, 12)
        anchors = rng.uniform(-40, 40, (M, 2))
        true = rng.uniform(-40, 40, 2)
        d = np.linalg.norm(anchors - true, axis=1)
        if d.min() < 0.5:
            continue
        fix, _ = position_fix(anchors, sample_rssi(d, p), p, self_pos=true + 1.0)
        assert np.allclose(fix, true, atol=1e-6)


def test_zero_noise_permutation_invariance():
    p = ChannelParams(sigma2_shadow=0.0)
    rng = np.random.default_rng(7)
    anchors = rng.uniform(-20, 20, (7, 2))
    true = np.array([1.5, -2.0])
    rx = sample_rssi(np.linalg.norm(anchors - true, axis=1), p)
    base = wls_position(build_linear_system(anchors, estimate_distance_raw(rx, p)))
    for _ in range(10):
        perm = rng.permutation(7)
        out = wls_position(build_linear_system(anchors[perm], estimate_distance_raw(rx[perm], p)))
        assert np.allclose(out, base, atol=1e-9)


def test_pivot_order_invariance_with_fixed_first_anchor():
    rng = np.random.default_rng(8)
    anchors = rng.uniform(-20, 20, (6, 2))
    d = rng.uniform(5, 25, 6)
    W = hyperbolic_weighting(d, 0.16)
    base = wls_position(build_linear_system(anchors, d, W))
    perm = np.r_[0, rng.permutation(np.arange(1, 6))]
    Wp = hyperbolic_weighting(d[perm], 0.16)
    assert np.allclose(wls_position(build_linear_system(anchors[perm], d[perm], Wp)), base,
                       atol=1e-9)


def test_rssi_fix_trusted_set_filtering():
    p = ChannelParams(sigma2_shadow=0.0)
    anchors = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
    true = np.array([3.0, 4.0])
    bcast = {j: np.r_[a, 0.0, 0.0] for j, a in enumerate(anchors)}
    samples = [RssiSample(rx_power=sample_rssi(np.linalg.norm(a - true), p), tx_id=j,
                          rx_id=9, k=0) for j, a in enumerate(anchors)]
    fix, diag = rssi_position_fix(np.r_[true, 0, 0], bcast, samples, p, {0, 1, 2, 3})
    assert np.allclose(fix, true, atol=1e-6) and diag.anchor_ids == [0, 1, 2, 3]
    fix, diag = rssi_position_fix(np.r_[true, 0, 0], bcast, samples, p, {0, 1, 3},
                                  first_step=True)
    assert diag.anchor_ids == [0, 1, 3] and np.allclose(fix, true, atol=1e-6)
    with pytest.raises(InsufficientAnchorsError):
        rssi_position_fix(np.r_[true, 0, 0], bcast, samples, p, {0, 1})


def test_weighted_beats_unweighted():
    p = ChannelParams()
    rng = np.random.default_rng(0)
    true = np.array([3.0, 4.0])
    ang, rad = rng.uniform(0, 2 * np.pi, 11), rng.uniform(3, 40, 11)
    anchors = true + np.c_[rad * np.cos(ang), rad * np.sin(ang)]
    d = np.linalg.norm(anchors - true, axis=1)
    ew, eu = [], []
    for _ in range(1000):
        rx = sample_rssi(d, p, rng.standard_normal(11) * p.sigma_shadow)
        ew.append(position_fix(anchors, rx, p, self_pos=true)[0] - true)
        eu.append(position_fix(anchors, rx, p, self_pos=true, weighted=False)[0] - true)
    assert np.sqrt(np.mean(np.square(ew))) < np.sqrt(np.mean(np.square(eu)))


def test_batch_matches_single():
    p = ChannelParams()
    rng = np.random.default_rng(17)
    N = 10
    pool = rng.uniform(-30, 30, (N, 2))
    for _ in range(50):
        R = 4
        mask = rng.random((R, N)) < 0.7
        truth = rng.uniform(-30, 30, (R, 2))
        d = np.linalg.norm(pool[None] - truth[:, None], axis=2)
        rx = sample_rssi(d, p, rng.standard_normal((R, N)) * p.sigma_shadow)
        self_pos = truth + rng.normal(0, 1, (R, 2))
        self_pos[0] = np.nan
        fixes, cond, clamped, ok = batch_position_fix(pool, rx, mask, p, self_pos)
        for r in range(R):
            idx = np.nonzero(mask[r])[0]
            if len(idx) < 3:
                assert not ok[r] and np.isnan(fixes[r]).all()
                continue
            sp = None if r == 0 else self_pos[r]
            single, diag = position_fix(pool[idx], rx[r, idx], p, sp)
            assert ok[r]
            assert np.allclose(fixes[r], single, rtol=1e-9, atol=1e-9)
            assert clamped[r] == diag.clamped


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=3, max_size=11,
                unique=True),
       st.tuples(st.floats(-50, 50), st.floats(-50, 50)))
def test_zero_noise_fix_property(anchors, true):
    anchors, true = np.array(anchors), np.array(true)
    d = np.linalg.norm(anchors - true, axis=1)
    centered = anchors - anchors.mean(0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if d.min() < 0.5 or sv[-1] < 1.0 or np.min(np.linalg.norm(
            anchors[:, None] - anchors[None], axis=2)[~np.eye(len(anchors), dtype=bool)]) < 0.5:
        return
    p = ChannelParams(sigma2_shadow=0.0)
    fix, diag = position_fix(anchors, sample_rssi(d, p), p)
    if diag.condition > 1e8:
        return
    assert np.allclose(fix, true, atol=1e-6)
