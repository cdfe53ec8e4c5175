"""Chi-squared residual detectors and their statistical tuning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidParameterError, NumericalError
from .model import LtiModel
from .special import inv_reg_lower_gamma, normal_quantile

NOMINAL = "nominal"
ANOMALOUS = "anomalous"


@dataclass(frozen=True)
class DetectorParams:
    """Tuning shared by the on-board and inter-agent detectors.

    ``latch_alpha`` is the significance used for the one-way switch into
    recovery (and for flagging neighbors); ``alpha`` sets the classification
    bounds reported at every step.
    """

    a_des: float = 0.05
    alpha: float = 0.01
    ell: int = 100
    latch_alpha: float = 1e-9

    def __post_init__(self):
        if not 0 < self.a_des < 1:
            raise InvalidParameterError("a_des must lie in (0, 1)")
        if not 0 < self.alpha < 1 or not 0 < self.latch_alpha < 1:
            raise InvalidParameterError("significance levels must lie in (0, 1)")
        if int(self.ell) != self.ell or self.ell < 1:
            raise InvalidParameterError("ell must be a positive integer")


@dataclass
class DetectorState:
    a_des: float
    tau: float
    alpha: float
    ell: int
    a_hat: float
    bounds: tuple[float, float]

    @classmethod
    def create(cls, params: DetectorParams, dof: int) -> "DetectorState":
        return cls(a_des=params.a_des, tau=tune_threshold(params.a_des, dof),
                   alpha=params.alpha, ell=params.ell, a_hat=params.a_des,
                   bounds=detection_bounds(params.a_des, params.alpha, params.ell))

    def observe(self, z: float) -> str:
        """Feed one test measure; returns the classification after the update."""
        self.a_hat = update_alarm_rate(self.a_hat, int(z > self.tau), self.ell)
        return classify(self.a_hat, self.bounds)


@dataclass(frozen=True)
class ResidualCovariances:
    sigma_full: np.ndarray
    sigma_pos: np.ndarray
    P_prior: np.ndarray
    P_post: np.ndarray
    gain: np.ndarray
    sigma_interagent: np.ndarray | None = None
    sigma_interagent_pos: np.ndarray | None = None


def _riccati_step(A, C, Q, R, P):
    S = C @ P @ C.T + R
    K = np.linalg.solve(S, C @ P).T
    P_post = P - K @ C @ P
    P_next = A @ P_post @ A.T + Q
    return 0.5 * (P_next + P_next.T)


def solve_filter_riccati(A, C, Q, R, tol: float = 1e-12, max_iter: int = 1_000_000):
    """Steady-state prior covariance of the Kalman filter.

    The covariance recursion is run in doubling form (each pass squares the
    horizon) and then confirmed by plain recursion steps until the relative
    change drops below ``tol``.
    """
    A = np.asarray(A, float)
    C = np.asarray(C, float)
    Q = np.asarray(Q, float)
    R = np.asarray(R, float)
    n = A.shape[0]
    I = np.eye(n)
    Ak = A.T.copy()
    Gk = C.T @ np.linalg.solve(R, C)
    Hk = Q.copy()
    iters = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while iters < max_iter:
            iters += 1
            try:
                W = np.linalg.solve(I + Gk @ Hk, np.hstack([Ak, Gk]))
            except np.linalg.LinAlgError as exc:
                raise NumericalError("Riccati doubling step is singular") from exc
            WA, WG = W[:, :n], W[:, n:]
            H_next = Hk + Ak.T @ Hk @ WA
            G_next = Gk + Ak @ WG @ Ak.T
            Ak = Ak @ WA
            H_next = 0.5 * (H_next + H_next.T)
            change = np.linalg.norm(H_next - Hk) / max(np.linalg.norm(H_next), 1e-300)
            Hk, Gk = H_next, 0.5 * (G_next + G_next.T)
            if not np.all(np.isfinite(Hk)):
                raise NumericalError("Riccati iteration diverged")
            if change < tol:
                break
    P = Hk
    for _ in range(max_iter - iters):
        P_next = _riccati_step(A, C, Q, R, P)
        change = np.linalg.norm(P_next - P) / max(np.linalg.norm(P_next), 1e-300)
        P = P_next
        if change < tol:
            return P
    raise NumericalError("Riccati recursion did not reach a fixed point")


def steady_state_residual_covariance(model: LtiModel) -> ResidualCovariances:
    P = solve_filter_riccati(model.A, model.C, model.Q, model.R)
    S = model.C @ P @ model.C.T + model.R
    S = 0.5 * (S + S.T)
    K = np.linalg.solve(S, model.C @ P).T
    P_post = P - K @ model.C @ P
    sig_ia = inter_agent_covariance(K, np.diag(S))
    D = model.dim
    return ResidualCovariances(sigma_full=S, sigma_pos=S[:D, :D].copy(), P_prior=P,
                               P_post=0.5 * (P_post + P_post.T), gain=K,
                               sigma_interagent=sig_ia,
                               sigma_interagent_pos=sig_ia[:D, :D].copy())


def chi_square_test_measure(r_pos, sigma_pos) -> float | np.ndarray:
    """Quadratic form ``r' S^-1 r``; vectorized over leading axes of ``r_pos``."""
    r = np.asarray(r_pos, dtype=float)
    S = np.asarray(sigma_pos, dtype=float)
    if S.shape != (r.shape[-1], r.shape[-1]):
        raise DimensionError("residual and covariance sizes disagree")
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("residual covariance is not positive definite") from exc
    w = np.linalg.solve(L, r.reshape(-1, r.shape[-1]).T)
    z = np.einsum("ij,ij->j", w, w)
    return float(z[0]) if r.ndim == 1 else z.reshape(r.shape[:-1])


def inter_agent_predict(model: LtiModel, xhat_j, u_j) -> np.ndarray:
    """Model prediction of a neighbor's next estimate from its broadcast."""
    xhat_j = np.asarray(xhat_j, dtype=float)
    u_j = np.asarray(u_j, dtype=float)
    if xhat_j.shape[-1] != model.n or u_j.shape[-1] != model.n_inputs:
        raise DimensionError("broadcast state/input size does not match the model")
    return xhat_j @ model.A.T + u_j @ model.B.T


def inter_agent_covariance(K, sigma_j_diag) -> np.ndarray:
    """Diagonal covariance of the inter-agent residual.

    ``sigma_j_diag`` holds the neighbor's per-sensor residual variances.
    """
    K = np.asarray(K, dtype=float)
    var = np.asarray(sigma_j_diag, dtype=float)
    if K.shape[1] != var.shape[0]:
        raise DimensionError("gain columns must match the number of sensors")
    return np.diag((K * K) @ var)


def tune_threshold(a_des: float, dof: int) -> float:
    """Chi-squared threshold exceeded with probability ``a_des`` under H0."""
    if not 0 < a_des < 1:
        raise InvalidParameterError("a_des must lie in (0, 1)")
    if dof < 1:
        raise InvalidParameterError("degrees of freedom must be >= 1")
    return 2.0 * inv_reg_lower_gamma(1.0 - a_des, dof / 2.0)


def update_alarm_rate(a_hat, alarm, ell: int):
    """Exponential moving average of the alarm indicator."""
    if ell < 1:
        raise InvalidParameterError("ell must be >= 1")
    out = a_hat + (alarm - a_hat) / ell
    return np.clip(out, 0.0, 1.0) if isinstance(out, np.ndarray) else min(max(out, 0.0), 1.0)


def detection_bounds(a_des: float, alpha: float, ell: int) -> tuple[float, float]:
    if not 0 < alpha < 1:
        raise InvalidParameterError("alpha must lie in (0, 1)")
    if ell < 1:
        raise InvalidParameterError("ell must be >= 1")
    margin = abs(normal_quantile(alpha / 2.0)) * math.sqrt(a_des * (1 - a_des) / (2 * ell - 1))
    return a_des - margin, a_des + margin


def classify(a_hat: float, bounds: tuple[float, float]) -> str:
    lo, hi = bounds
    return NOMINAL if lo <= a_hat <= hi else ANOMALOUS
