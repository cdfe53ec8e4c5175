"""RSSI ranging and weighted multilateration from mobile anchors."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelParams, RssiSample
from .errors import (InsufficientAnchorsError, InvalidParameterError,
                     SingularGeometryError)

log = logging.getLogger(__name__)

ILL_CONDITIONED = 1e12


@dataclass(frozen=True)
class DistanceEstimate:
    anchor_id: int
    d_hat: float
    d_raw: float
    sigma_d: float
    anchor_pos: np.ndarray


@dataclass(frozen=True)
class MultilaterationProblem:
    omega: np.ndarray
    phi: np.ndarray
    W: np.ndarray

    @property
    def M(self) -> int:
        return self.omega.shape[0] + 1


@dataclass
class FixDiagnostics:
    n_anchors: int = 0
    anchor_ids: list = field(default_factory=list)
    condition: float = float("nan")
    clamped: int = 0
    ill_conditioned: bool = False
    weights_fallback: bool = False


def estimate_distance_raw(rx_power, params: ChannelParams):
    """Invert the mean path-loss law: distance implied by a received power."""
    path_loss = params.p_tx - np.asarray(rx_power, dtype=float)
    d = params.d0 * 10.0 ** ((path_loss - params.pl_d0) / (10.0 * params.beta))
    return float(d) if d.ndim == 0 else d


def sigma_d(params: ChannelParams) -> float:
    """Log-normal shape parameter of the ranging error."""
    if params.beta <= 0:
        raise InvalidParameterError("beta must be positive")
    return params.sigma_shadow * math.log(10.0) / (10.0 * params.beta)


def bias_compensate(d_raw, d_ref, sigma_d: float, return_flags: bool = False):
    """Remove the expected log-normal ranging bias ``d_ref (e^(s^2/2) - 1)``.

    Non-positive results are clamped to ``0.01 d_ref``.
    """
    d_raw = np.asarray(d_raw, dtype=float)
    d_ref = np.asarray(d_ref, dtype=float)
    if np.any(d_ref <= 0):
        raise InvalidParameterError("reference distance must be positive")
    out = d_raw - d_ref * math.expm1(0.5 * sigma_d**2)
    clamped = out <= 0
    if np.any(clamped):
        out = np.where(clamped, 0.01 * d_ref, out)
        log.debug("bias compensation clamped %d distance(s)", int(np.sum(clamped)))
    if out.ndim == 0:
        out = float(out)
    return (out, clamped) if return_flags else out


def build_linear_system(anchors, distances, W=None) -> MultilaterationProblem:
    """Linearize the range circles by subtracting the first (pivot) anchor."""
    anchors = np.asarray(anchors, dtype=float)
    d = np.asarray(distances, dtype=float)
    M, D = anchors.shape
    if M < D + 1:
        raise InsufficientAnchorsError(f"need at least {D + 1} anchors, got {M}")
    if len(d) != M:
        raise InvalidParameterError("one distance per anchor required")
    b = np.einsum("ij,ij->i", anchors, anchors)
    omega = 2.0 * (anchors[1:] - anchors[0])
    phi = d[0] ** 2 - d[1:] ** 2 + b[1:] - b[0]
    if W is None:
        W = np.eye(M - 1)
    return MultilaterationProblem(omega=omega, phi=phi, W=np.asarray(W, dtype=float))


def squared_range_variance(distances, sigma_d: float):
    """Variance of a squared log-normal range with median ``distances``."""
    d = np.asarray(distances, dtype=float)
    s2 = sigma_d**2
    return d**4 * (math.exp(8 * s2) - math.exp(4 * s2))


def hyperbolic_weighting(distances, sigma_d: float, return_flag: bool = False):
    """Covariance of the linearized right-hand side (pivot is entry 0)."""
    d = np.asarray(distances, dtype=float)
    if len(d) < 2:
        raise InvalidParameterError("need at least two distances")
    if np.any(d <= 0):
        raise InvalidParameterError("distances must be positive")
    if sigma_d == 0:
        W = np.eye(len(d) - 1)
        return (W, True) if return_flag else W
    V = squared_range_variance(d, sigma_d)
    W = np.full((len(d) - 1, len(d) - 1), V[0])
    W[np.diag_indices_from(W)] += V[1:]
    return (W, False) if return_flag else W


def _solve_wls(problem: MultilaterationProblem):
    omega, phi, W = problem.omega, problem.phi, problem.W
    L = np.linalg.cholesky(W)
    Ow = np.linalg.solve(L, omega)
    fw = np.linalg.solve(L, phi)
    sv = np.linalg.svd(Ow, compute_uv=False)
    if len(sv) < omega.shape[1] or sv[-1] <= 1e-12 * sv[0]:
        raise SingularGeometryError("anchor geometry is rank deficient")
    cond = float((sv[0] / sv[-1]) ** 2)
    N = Ow.T @ Ow
    p = np.linalg.solve(N, Ow.T @ fw)
    return p, cond


def wls_position(problem: MultilaterationProblem) -> np.ndarray:
    """Weighted least-squares solution ``(O' W^-1 O)^-1 O' W^-1 phi``."""
    p, cond = _solve_wls(problem)
    if cond > ILL_CONDITIONED:
        log.warning("ill-conditioned multilateration (cond=%.3g)", cond)
    return p


def position_fix(anchor_pos, rx_power, params: ChannelParams, self_pos=None,
                 weighted: bool = True):
    """Position from anchor positions and the RSSI received from each.

    ``self_pos`` is the agent's own position estimate used for the bias and
    weighting reference distances; ``None`` seeds them with the raw ranges.
    """
    anchor_pos = np.asarray(anchor_pos, dtype=float)
    M, D = anchor_pos.shape
    if M < D + 1:
        raise InsufficientAnchorsError(f"need at least {D + 1} anchors, got {M}")
    diag = FixDiagnostics(n_anchors=M)
    s_d = sigma_d(params)
    d_raw = np.asarray(estimate_distance_raw(rx_power, params), dtype=float)
    if self_pos is None:
        d_ref = d_raw
    else:
        d_ref = np.linalg.norm(anchor_pos - np.asarray(self_pos, dtype=float)[:D], axis=1)
        d_ref = np.where(d_ref > 1e-6, d_ref, d_raw)
    d_hat, clamped = bias_compensate(d_raw, d_ref, s_d, return_flags=True)
    d_hat = np.atleast_1d(d_hat)
    diag.clamped = int(np.sum(clamped))
    order = np.argsort(d_hat, kind="stable")
    anchors, d_hat, d_ref = anchor_pos[order], d_hat[order], d_ref[order]
    if weighted:
        W, diag.weights_fallback = hyperbolic_weighting(d_ref, s_d, return_flag=True)
    else:
        W = None
    problem = build_linear_system(anchors, d_hat, W)
    p, diag.condition = _solve_wls(problem)
    diag.ill_conditioned = diag.condition > ILL_CONDITIONED
    return p, diag


def rssi_position_fix(self_estimate, neighbor_broadcasts, rssi_samples,
                      params: ChannelParams, trusted_set, first_step: bool = False,
                      dim: int = 2):
    """Full ranging pipeline for one compromised agent.

    ``neighbor_broadcasts`` maps agent id to its broadcast state estimate and
    ``rssi_samples`` are the samples this agent received this step. Only
    anchors in ``trusted_set`` with both a broadcast and a sample are used.
    """
    rx = {s.tx_id: s.rx_power for s in rssi_samples}
    ids = sorted(j for j in trusted_set if j in rx and j in neighbor_broadcasts)
    if len(ids) < dim + 1:
        raise InsufficientAnchorsError(f"{len(ids)} trusted anchors, need {dim + 1}")
    anchors = np.array([np.asarray(neighbor_broadcasts[j], dtype=float)[:dim] for j in ids])
    power = np.array([rx[j] for j in ids])
    self_pos = None if first_step else np.asarray(self_estimate, dtype=float)[:dim]
    p, diag = position_fix(anchors, power, params, self_pos=self_pos)
    diag.anchor_ids = ids
    return p, diag


def batch_position_fix(anchor_pos, rx_power, mask, params: ChannelParams, self_pos=None,
                       weighted: bool = True):
    """``position_fix`` for several agents sharing one pool of anchors.

    ``rx_power`` and ``mask`` are ``(R, N)``: row r holds the powers agent r
    received from each of the ``N`` pool anchors and which of them it trusts.
    ``self_pos`` is ``(R, D)``; NaN rows seed the reference distances with the
    raw ranges. The hyperbolic weighting matrix is diagonal plus a rank-one
    term, so its inverse is applied in closed form. Rows with fewer than
    ``D + 1`` trusted anchors or degenerate geometry come back NaN.

    Returns ``(fixes, condition, clamped_count, ok)``.
    """
    P = np.asarray(anchor_pos, dtype=float)
    rx = np.atleast_2d(np.asarray(rx_power, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    R, N = mask.shape
    D = P.shape[1]
    s_d = sigma_d(params)
    with np.errstate(over="ignore", invalid="ignore"):
        d_raw = estimate_distance_raw(np.where(mask, rx, params.p_tx - params.pl_d0), params)
    d_raw = np.asarray(d_raw).reshape(R, N)
    if self_pos is None:
        d_ref = d_raw
    else:
        sp = np.asarray(self_pos, dtype=float).reshape(R, D)
        d_est = np.linalg.norm(P[None, :, :] - sp[:, None, :], axis=2)
        seed = np.isnan(sp).any(axis=1)[:, None] | ~(d_est > 1e-6)
        d_ref = np.where(seed, d_raw, d_est)
    d_hat = d_raw - d_ref * math.expm1(0.5 * s_d**2)
    clamped = (d_hat <= 0) & mask
    d_hat = np.where(d_hat <= 0, 0.01 * d_ref, d_hat)

    count = mask.sum(axis=1)
    ok = count >= D + 1
    pivot = np.argmin(np.where(mask, d_hat, np.inf), axis=1)
    rows = np.arange(R)
    p1 = P[pivot]                                    # (R, D)
    omega = 2.0 * (P[None, :, :] - p1[:, None, :])   # (R, N, D)
    b = np.einsum("ij,ij->i", P, P)
    d1 = d_hat[rows, pivot]
    phi = d1[:, None] ** 2 - d_hat**2 + b[None, :] - b[pivot][:, None]
    use = mask.copy()
    use[rows, pivot] = False
    if weighted and s_d > 0:
        V = squared_range_variance(d_ref, s_d)
        lam = np.where(use, 1.0 / np.where(use, V, 1.0), 0.0)
        v1 = V[rows, pivot]
    else:
        lam = use.astype(float)
        v1 = np.zeros(R)
    # W^-1 = diag(lam) - v1 lam lam' / (1 + v1 sum(lam))
    denom = 1.0 + v1 * lam.sum(axis=1)
    lo = np.einsum("rn,rnd->rd", lam, omega)
    lf = np.einsum("rn,rn->r", lam, phi)
    normal = (np.einsum("rn,rnd,rne->rde", lam, omega, omega)
              - (v1 / denom)[:, None, None] * lo[:, :, None] * lo[:, None, :])
    rhs = (np.einsum("rn,rnd,rn->rd", lam, omega, phi)
           - (v1 / denom * lf)[:, None] * lo)
    ev = np.linalg.eigvalsh(np.where(ok[:, None, None], normal, np.eye(D)))
    scale = np.maximum(ev[:, -1], 1e-300)
    good = ok & (ev[:, 0] > 1e-24 * scale)
    cond = np.where(good, ev[:, -1] / np.where(good, ev[:, 0], 1.0), np.inf)
    safe = np.where(good[:, None, None], normal, np.eye(D))
    fixes = np.linalg.solve(safe, rhs[..., None])[..., 0]
    fixes[~good] = np.nan
    return fixes, cond, clamped.sum(axis=1), good
