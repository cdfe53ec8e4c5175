"""Kalman filtering, sensor reconfiguration and runtime noise adaptation."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParameterError, NumericalError
from .model import LtiModel

NOMINAL = "nominal"
RECOVERED = "recovered"

R_FLOOR = 1e-4


@dataclass
class KalmanState:
    xhat: np.ndarray
    P: np.ndarray
    C_eff: np.ndarray
    R_eff: np.ndarray
    mode: str = NOMINAL

    @classmethod
    def initial(cls, model: LtiModel, xhat, P) -> "KalmanState":
        return cls(xhat=np.asarray(xhat, float).copy(), P=np.asarray(P, float).copy(),
                   C_eff=model.C.copy(), R_eff=model.R.copy())


@dataclass
class AdaptiveCovState:
    sigma_bar: np.ndarray
    Q_bar: np.ndarray
    gamma: float = 0.01
    prev_correction_state: np.ndarray | None = None
    R_floor: float = R_FLOOR

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise InvalidParameterError("gamma must lie in (0, 1)")


def predict_arrays(xhat, P, A, B, Q, u):
    """Time update; broadcasts over leading agent axes."""
    xhat = xhat @ A.T + u @ B.T
    P = A @ P @ A.T + Q
    return xhat, P


def update_arrays(xhat, P, C, R, y):
    """Measurement update; broadcasts over leading agent axes.

    Returns the corrected state, covariance, gain and innovation.
    """
    PCt = P @ np.swapaxes(C, -1, -2)
    S = C @ PCt + R
    try:
        K = np.swapaxes(np.linalg.solve(S, np.swapaxes(PCt, -1, -2)), -1, -2)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is singular") from exc
    innov = y - np.einsum("...ij,...j->...i", C, xhat)
    xhat = xhat + np.einsum("...ij,...j->...i", K, innov)
    P = _sym(P - K @ C @ P)
    return xhat, P, K, innov


def kf_predict(state: KalmanState, model: LtiModel, u) -> KalmanState:
    xhat, P = predict_arrays(state.xhat, state.P, model.A, model.B, model.Q,
                             np.asarray(u, dtype=float))
    return replace(state, xhat=xhat, P=P)


def kf_update(state: KalmanState, model: LtiModel, y) -> KalmanState:
    xhat, P, _, _ = update_arrays(state.xhat, state.P, state.C_eff, state.R_eff,
                                  np.asarray(y, dtype=float))
    return replace(state, xhat=xhat, P=P)


def reconfigure_output(model: LtiModel) -> np.ndarray:
    """Output matrix whose position rows read the position states directly."""
    D, n = model.dim, model.n
    C_bar = model.C.copy()
    C_bar[:D] = 0.0
    C_bar[:D, :D] = np.eye(D)
    return C_bar


def correction_state(fix, xhat, dim: int) -> np.ndarray:
    """Estimate with its position entries replaced by the ranging fix."""
    x = np.array(xhat, dtype=float)
    x[:dim] = fix
    return x


def rssi_residual(fix, adaptive: AdaptiveCovState, model: LtiModel, u_prev):
    """Fix minus the one-step prediction from the previous correction state.

    Returns ``None`` when no previous fix exists.
    """
    if adaptive.prev_correction_state is None:
        return None
    pred = (adaptive.prev_correction_state @ model.A.T
            + np.asarray(u_prev, dtype=float) @ model.B.T)
    return np.asarray(fix, dtype=float) - pred[..., : model.dim]


def update_residual_covariance(adaptive: AdaptiveCovState, r_bar) -> AdaptiveCovState:
    r = np.asarray(r_bar, dtype=float)
    outer = r[..., :, None] * r[..., None, :]
    sigma = (1.0 - adaptive.gamma) * adaptive.sigma_bar + adaptive.gamma * outer
    return replace(adaptive, sigma_bar=_sym(sigma))


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def floor_eigenvalues(M, floor: float) -> np.ndarray:
    """Raise every eigenvalue below ``floor`` to ``floor`` (batched)."""
    M = _sym(np.asarray(M, dtype=float))
    w, V = np.linalg.eigh(M)
    if np.all(w >= floor):
        return M
    w = np.maximum(w, floor)
    return (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)


def extract_R(adaptive: AdaptiveCovState) -> np.ndarray:
    """Ranging-fix covariance implied by the residual covariance."""
    R_bar = 0.5 * (adaptive.sigma_bar - 2.0 * adaptive.Q_bar)
    return floor_eigenvalues(R_bar, adaptive.R_floor)


def extract_R_innovation(sigma_bar, P_prior_pos, floor: float = R_FLOOR) -> np.ndarray:
    """Innovation-matching estimate ``Sigma - C P C'`` used by the baseline."""
    return floor_eigenvalues(np.asarray(sigma_bar) - np.asarray(P_prior_pos), floor)


def assemble_R_full(R_bar, R_rest) -> np.ndarray:
    """Block-diagonal covariance: ranging fix first, other sensors after.

    ``R_bar`` may carry leading agent axes; ``R_rest`` is shared.
    """
    R_bar = np.asarray(R_bar, dtype=float)
    if R_bar.ndim < 2:
        R_bar = np.atleast_2d(R_bar)
    R_rest = np.asarray(R_rest, dtype=float)
    if R_rest.size == 0:
        return R_bar.copy()
    R_rest = np.atleast_2d(R_rest)
    D, m = R_bar.shape[-1], R_rest.shape[0]
    out = np.zeros(R_bar.shape[:-2] + (D + m, D + m))
    out[..., :D, :D] = R_bar
    out[..., D:, D:] = R_rest
    return out
