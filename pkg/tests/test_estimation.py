from dataclasses import replace

import numpy as np
import pytest

from resilient_swarm.detection import steady_state_residual_covariance
from resilient_swarm.errors import InvalidParameterError, NumericalError
from resilient_swarm.estimation import (RECOVERED, AdaptiveCovState, KalmanState,
                                        assemble_R_full, correction_state, extract_R,
                                        extract_R_innovation, floor_eigenvalues, kf_predict,
                                        kf_update, predict_arrays, reconfigure_output,
                                        rssi_residual, update_arrays,
                                        update_residual_covariance)
from resilient_swarm.model import LtiModel, build_double_integrator


@pytest.fixture(scope="module")
def di():
    return build_double_integrator(0.1, 1e-4, 1e-3, 0.1, 0.01)


def adaptive(sigma=None, q=1e-4, gamma=0.01, prev=None):
    return AdaptiveCovState(sigma_bar=np.eye(2) if sigma is None else np.asarray(sigma, float),
                            Q_bar=q * np.eye(2), gamma=gamma, prev_correction_state=prev)


def test_predict_examples():
    x, P = np.array([1.0, 2.0]), np.diag([0.3, 0.4])
    x2, P2 = predict_arrays(x, P, np.eye(2), np.zeros((2, 1)), np.zeros((2, 2)), np.zeros(1))
    assert np.array_equal(x2, x) and np.array_equal(P2, P)
    _, P3 = predict_arrays(x, np.zeros((2, 2)), np.eye(2), np.zeros((2, 1)), 0.7 * np.eye(2),
                           np.zeros(1))
    assert np.allclose(P3, 0.7 * np.eye(2))


def test_predict_matches_oracle(di):
    rng = np.random.default_rng(1)
    G = rng.normal(size=(4, 4))
    s = KalmanState.initial(di, rng.normal(size=4), G @ G.T)
    u = rng.normal(size=2)
    out = kf_predict(s, di, u)
    assert np.allclose(out.xhat, di.A @ s.xhat + di.B @ u, atol=1e-12)
    assert np.allclose(out.P, di.A @ s.P @ di.A.T + di.Q, atol=1e-12)


def test_update_limits(di):
    s = KalmanState.initial(di, np.zeros(4), np.eye(4))
    y = np.array([1.0, -2.0, 0.5, 0.3])
    blind = kf_update(replace(s, R_eff=1e12 * np.eye(4)), di, y)
    assert np.linalg.norm(blind.xhat - s.xhat) < 1e-6
    sharp = kf_update(replace(s, R_eff=1e-12 * np.eye(4)), di, y)
    assert np.allclose(sharp.xhat, y, atol=1e-6)
    assert np.allclose(sharp.P, sharp.P.T)


def test_update_singular_innovation():
    with pytest.raises(NumericalError):
        update_arrays(np.zeros(2), np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), np.ones(2))


def test_update_batches_over_agents(di):
    rng = np.random.default_rng(2)
    xs = rng.normal(size=(5, 4))
    Ps = np.stack([np.eye(4) * (i + 1) for i in range(5)])
    ys = rng.normal(size=(5, 4))
    bx, bP, _, _ = update_arrays(xs, Ps, di.C, di.R, ys)
    for i in range(5):
        x1, P1, _, _ = update_arrays(xs[i], Ps[i], di.C, di.R, ys[i])
        assert np.allclose(bx[i], x1, atol=1e-13) and np.allclose(bP[i], P1, atol=1e-13)


def test_error_covariance_consistency(di):
    res = steady_state_residual_covariance(di)
    rng = np.random.default_rng(4)
    F, T = 20, 10_000
    Lq, Lr = np.linalg.cholesky(di.Q), np.linalg.cholesky(di.R)
    x = np.zeros((F, 4))
    xh = np.zeros((F, 4))
    P = np.broadcast_to(res.P_post, (F, 4, 4)).copy()
    acc = np.zeros((4, 4))
    u = np.zeros((F, 2))
    for _ in range(T // F * 2):
        x = x @ di.A.T + rng.standard_normal((F, 4)) @ Lq.T
        y = x + rng.standard_normal((F, 4)) @ Lr.T
        xp, Pp = predict_arrays(xh, P, di.A, di.B, di.Q, u)
        xh, P, _, _ = update_arrays(xp, Pp, di.C, di.R, y)
        e = x - xh
        acc += e.T @ e
    emp = acc / (F * (T // F * 2))
    assert np.linalg.norm(emp - res.P_post) / np.linalg.norm(res.P_post) < 0.10


def test_reconfigure_output(di):
    C_bar = reconfigure_output(di)
    assert np.array_equal(C_bar, di.C)  # already of the reconfigured form
    C = np.array([[1.0, 0.5, 0, 0], [0.2, 1, 0, 0.1], [0, 0, 1, 0], [0, 0, 0.3, 1]])
    m = LtiModel(A=di.A, B=di.B, C=C, Q=di.Q, R=di.R, dim=2)
    C_bar = reconfigure_output(m)
    assert np.array_equal(C_bar[:2], [[1, 0, 0, 0], [0, 1, 0, 0]])
    assert np.array_equal(C_bar[2:], C[2:])
    m2 = LtiModel(A=di.A, B=di.B, C=C_bar, Q=di.Q, R=di.R, dim=2)
    assert np.array_equal(reconfigure_output(m2), C_bar)


def test_rssi_residual_examples(di):
    still = np.array([3.0, 4.0, 0.0, 0.0])
    ad = adaptive(prev=still)
    assert np.allclose(rssi_residual([3.0, 4.0], ad, di, np.zeros(2)), 0)
    assert np.allclose(rssi_residual([4.0, 4.0], ad, di, np.zeros(2)), [1, 0])
    assert rssi_residual([3.0, 4.0], adaptive(), di, np.zeros(2)) is None
    moving = np.array([0.0, 0.0, 1.0, 2.0])
    r = rssi_residual([0.1, 0.2], adaptive(prev=moving), di, np.zeros(2))
    assert np.allclose(r, 0, atol=1e-15)


def test_correction_state():
    x = correction_state([7.0, 8.0], np.array([1.0, 2, 3, 4]), 2)
    assert np.array_equal(x, [7, 8, 3, 4])


def test_residual_zero_mean(di):
    # noiseless dynamics, Gaussian fix noise: sample mean of the residual ~ 0
    rng = np.random.default_rng(5)
    S = np.array([[0.4, 0.1], [0.1, 0.3]])
    L = np.linalg.cholesky(S)
    x = np.array([0.0, 0.0, 0.5, -0.3])
    u = np.zeros(2)
    ad = adaptive()
    rs = []
    for _ in range(10_000):
        x = di.A @ x
        fix = x[:2] + L @ rng.standard_normal(2)
        r = rssi_residual(fix, ad, di, u)
        if r is not None:
            rs.append(r)
        ad = replace(ad, prev_correction_state=correction_state(fix, x, 2))
    rs = np.array(rs)
    se = np.sqrt(rs.var(axis=0) / len(rs))
    assert np.all(np.abs(rs.mean(axis=0)) < 3 * se)


def test_update_residual_covariance_example():
    ad = update_residual_covariance(adaptive(gamma=0.01), [1.0, 1.0])
    assert np.allclose(ad.sigma_bar, [[1.0, 0.01], [0.01, 1.0]], atol=1e-15)


def test_update_residual_covariance_contracts():
    ad = adaptive(sigma=[[2.0, 0.3], [0.3, 1.0]], gamma=0.05)
    start = ad.sigma_bar.copy()
    for _ in range(40):
        ad = update_residual_covariance(ad, [0.0, 0.0])
    assert np.allclose(ad.sigma_bar, start * 0.95**40, rtol=1e-12)


def test_update_residual_covariance_batched():
    sig = np.stack([np.eye(2), 2 * np.eye(2)])
    ad = AdaptiveCovState(sigma_bar=sig, Q_bar=np.zeros((2, 2)), gamma=0.1)
    r = np.array([[1.0, 0.0], [0.0, 2.0]])
    out = update_residual_covariance(ad, r).sigma_bar
    assert np.allclose(out[0], 0.9 * np.eye(2) + 0.1 * np.outer(r[0], r[0]))
    assert np.allclose(out[1], 1.8 * np.eye(2) + 0.1 * np.outer(r[1], r[1]))


def test_ema_of_iid_residuals():
    S = np.array([[0.6, 0.15], [0.15, 0.4]])
    L = np.linalg.cholesky(S)
    finals, errs = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ad = adaptive(sigma=np.eye(2), gamma=0.01)
        for r in rng.standard_normal((2000, 2)) @ L.T:
            ad = update_residual_covariance(ad, r)
        finals.append(ad.sigma_bar)
        errs.append(np.linalg.norm(ad.sigma_bar - S) / np.linalg.norm(S))
    assert np.median(errs) < 0.2
    assert np.allclose(np.mean(finals, axis=0), S, rtol=0.05, atol=0.01)


def test_gamma_validation():
    with pytest.raises(InvalidParameterError):
        adaptive(gamma=0.0)
    with pytest.raises(InvalidParameterError):
        adaptive(gamma=1.0)


def test_extract_R_examples():
    R = extract_R(adaptive(sigma=np.eye(2), q=0.1))
    assert np.allclose(R, 0.4 * np.eye(2))
    R = extract_R(adaptive(sigma=0.2 * np.eye(2), q=0.1))
    assert np.allclose(R, 1e-4 * np.eye(2))


def test_floor_reconstructs_from_eigenvectors():
    V = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2)
    M = V @ np.diag([-0.5, 2.0]) @ V.T
    out = floor_eigenvalues(M, 0.01)
    assert np.allclose(out, V @ np.diag([0.01, 2.0]) @ V.T)
    assert np.allclose(np.linalg.eigvalsh(out), [0.01, 2.0])
    batch = floor_eigenvalues(np.stack([M, np.eye(2)]), 0.01)
    assert np.allclose(batch[1], np.eye(2))


def test_extract_R_innovation():
    out = extract_R_innovation(np.diag([1.0, 0.5]), np.diag([0.2, 0.7]), 1e-4)
    assert np.allclose(out, np.diag([0.8, 1e-4]))


def test_balance_of_residual_covariance(di):
    # long-run average of the rolling covariance ~ 2 S + 2 Q
    rng = np.random.default_rng(6)
    S = np.array([[0.5, 0.1], [0.1, 0.3]])
    L = np.linalg.cholesky(S)
    Lq = np.linalg.cholesky(di.Q)
    x = np.zeros(4)
    u = np.zeros(2)
    ad = adaptive(sigma=np.eye(2), q=di.Q_pos[0, 0])
    hist = []
    for k in range(10_000):
        x = di.A @ x + Lq @ rng.standard_normal(4)
        fix = x[:2] + L @ rng.standard_normal(2)
        r = rssi_residual(fix, ad, di, u)
        if r is not None:
            ad = update_residual_covariance(ad, r)
        ad = replace(ad, prev_correction_state=correction_state(fix, x, 2))
        if k >= 1000:
            hist.append(ad.sigma_bar)
    target = 2 * S + 2 * di.Q_pos
    avg = np.mean(hist, axis=0)
    assert np.linalg.norm(avg - target) / np.linalg.norm(target) < 0.2


def test_end_to_end_R_recovery(di):
    # recovered-mode filter fed synthetic fixes with covariance S
    S = np.array([[0.6, 0.15], [0.15, 0.4]])
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        L, Lq = np.linalg.cholesky(S), np.linalg.cholesky(di.Q)
        C_bar = reconfigure_output(di)
        x, xh, P, u = np.zeros(4), np.zeros(4), 0.1 * np.eye(4), np.zeros(2)
        ad = adaptive(sigma=np.eye(2), q=1e-4)
        for _ in range(2000):
            x = di.A @ x + Lq @ rng.standard_normal(4)
            fix = x[:2] + L @ rng.standard_normal(2)
            y = np.r_[fix, x[2:] + 0.1 * rng.standard_normal(2)]
            xp, Pp = predict_arrays(xh, P, di.A, di.B, di.Q, u)
            r = rssi_residual(fix, ad, di, u)
            if r is not None:
                ad = update_residual_covariance(ad, r)
            R = assemble_R_full(extract_R(ad), di.R_rest)
            xh, P, _, _ = update_arrays(xp, Pp, C_bar, R, y)
            ad = replace(ad, prev_correction_state=correction_state(fix, xh, 2))
        errs.append(np.linalg.norm(extract_R(ad) - S) / np.linalg.norm(S))
    assert np.median(errs) < 0.2


def test_assemble_R_full():
    Rb = 0.4 * np.eye(2)
    out = assemble_R_full(Rb, 0.01 * np.eye(2))
    assert np.array_equal(out, np.diag([0.4, 0.4, 0.01, 0.01]))
    assert np.all(out[:2, 2:] == 0) and np.all(out[2:, :2] == 0)
    assert np.array_equal(assemble_R_full(Rb, np.zeros((0, 0))), Rb)
    batch = assemble_R_full(np.stack([Rb, 2 * Rb]), 0.01 * np.eye(2))
    assert batch.shape == (2, 4, 4) and np.allclose(batch[1, :2, :2], 0.8 * np.eye(2))


@pytest.mark.parametrize("mode", ["nominal", "recovered"])
def test_covariance_stays_psd(di, mode):
    rng = np.random.default_rng(7)
    C = di.C if mode == "nominal" else reconfigure_output(di)
    xh, P, u = np.zeros(4), np.eye(4), np.zeros(2)
    ad = adaptive(sigma=2 * np.eye(2))
    prev_fix = None
    for k in range(10_000):
        xp, Pp = predict_arrays(xh, P, di.A, di.B, di.Q, u)
        y = rng.normal(size=4)
        if mode == "recovered":
            r = rssi_residual(y[:2], ad, di, u)
            if r is not None:
                ad = update_residual_covariance(ad, r)
            R = assemble_R_full(extract_R(ad), di.R_rest)
        else:
            R = di.R
        xh, P, _, _ = update_arrays(xp, Pp, C, R, y)
        ad = replace(ad, prev_correction_state=correction_state(y[:2], xh, 2))
        assert np.array_equal(P, P.T)
    assert np.linalg.eigvalsh(P).min() >= -1e-10
