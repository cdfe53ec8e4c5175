"""Seeded closed-loop swarm simulation with detection and RSSI recovery."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import detection as det
from .channel import sample_rssi
from .config import VARIANT_ALIASES, VARIANTS, ScenarioConfig
from .control import formation_control, pairwise_distances
from .errors import InvalidParameterError, NumericalError
from .estimation import (AdaptiveCovState, assemble_R_full,
                         extract_R, extract_R_innovation, predict_arrays,
                         reconfigure_output, rssi_residual, update_arrays,
                         update_residual_covariance)
from .localization import batch_position_fix
from .threats import CompromiseSpec, CompromiseState, apply_compromise

log = logging.getLogger(__name__)


def canonical_variant(name: str) -> str:
    try:
        return VARIANT_ALIASES[name]
    except KeyError:
        raise InvalidParameterError(f"unknown variant {name!r}; choose from {VARIANTS}") from None


def formation_error(true_positions, edges, l_des: float) -> float:
    """Mean absolute deviation of edge lengths from ``l_des``; NaN if no edges."""
    edges = list(edges)
    if not edges:
        return math.nan
    p = np.asarray(true_positions, dtype=float)
    ii, jj = np.array(edges).T
    d = np.linalg.norm(p[ii] - p[jj], axis=1)
    return float(np.mean(np.abs(d - l_des)))


def random_positions(rng, n: int, region, min_spacing: float, max_tries: int = 10_000):
    """Uniform positions in ``region`` with a minimum pairwise spacing."""
    x0, y0, x1, y1 = region
    pts: list[np.ndarray] = []
    for _ in range(max_tries):
        p = rng.uniform((x0, y0), (x1, y1))
        if all(np.linalg.norm(p - q) >= min_spacing for q in pts):
            pts.append(p)
            if len(pts) == n:
                return np.array(pts)
    raise InvalidParameterError("init region too small for the requested spacing")


def draw_compromises(cfg: ScenarioConfig, rng) -> tuple[CompromiseSpec, ...]:
    a = cfg.attack
    if a.compromises:
        return tuple(a.compromises)
    chosen = rng.permutation(cfg.n_agents)[: a.n_attacked + a.n_faulty]
    specs = []
    for rank, target in enumerate(chosen.tolist()):
        kind = a.attack_kind if rank < a.n_attacked else a.fault_kind
        specs.append(CompromiseSpec(target=target, start_k=a.start_k, kind=kind,
                                    bias=tuple(a.bias), divert_target=tuple(a.divert_target),
                                    rate=a.rate, noise_scale=a.noise_scale))
    return tuple(sorted(specs, key=lambda s: s.target))


@dataclass
class Trace:
    """Per-step record of one run; arrays are indexed ``[step, agent, ...]``."""

    config: ScenarioConfig
    variant: str
    seed: int
    compromises: tuple[CompromiseSpec, ...]
    true_state: np.ndarray
    estimate: np.ndarray
    recovered: np.ndarray
    alarm: np.ndarray
    a_hat: np.ndarray
    anomalous: np.ndarray
    flagged_by: np.ndarray
    n_anchors: np.ndarray
    fix_condition: np.ndarray
    clamped: np.ndarray
    no_fix: np.ndarray
    R_diag: np.ndarray
    formation_error: np.ndarray
    detect_step: np.ndarray
    coincident: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.true_state.shape[0]

    @property
    def compromised_ids(self) -> list[int]:
        return [c.target for c in self.compromises]

    @property
    def attack_start(self) -> int:
        return min((c.start_k for c in self.compromises), default=self.n_steps)

    def position_error(self) -> np.ndarray:
        D = self.config.dim
        return self.true_state[..., :D] - self.estimate[..., :D]

    def final_goal_distance(self) -> np.ndarray:
        goal = np.asarray(self.config.goal)
        return np.linalg.norm(self.true_state[-1, :, : self.config.dim] - goal, axis=1)


class World:
    """Mutable state of one run. ``step()`` advances it by one round."""

    def __init__(self, cfg: ScenarioConfig, variant: str = "recovery_robust_R",
                 seed: int | None = None, init_positions=None):
        self.cfg = cfg
        self.variant = canonical_variant(variant)
        self.seed = cfg.seed if seed is None else seed
        self.respond = self.variant != "no_recovery"
        self.model = cfg.lti_model()
        m = self.model
        self.N, self.n, self.D = cfg.n_agents, m.n, m.dim
        N, n, D = self.N, self.n, self.D

        ss = np.random.SeedSequence(self.seed)
        init_ss, noise_ss = ss.spawn(2)
        init_rng = np.random.default_rng(init_ss)
        self.rng = np.random.default_rng(noise_ss)

        self.resid = det.steady_state_residual_covariance(m)
        self.tau = det.tune_threshold(cfg.detector.a_des, D)
        self.bounds = det.detection_bounds(cfg.detector.a_des, cfg.detector.alpha,
                                           cfg.detector.ell)
        self.latch_bounds = det.detection_bounds(cfg.detector.a_des, cfg.detector.latch_alpha,
                                                 cfg.detector.ell)
        self.sigma_pos_chol = np.linalg.cholesky(self.resid.sigma_pos)
        self.sigma_ia_pos_chol = np.linalg.cholesky(self.resid.sigma_interagent_pos)
        self.C_bar = reconfigure_output(m)

        if init_positions is None:
            pos = random_positions(init_rng, N, cfg.init_region, cfg.control.l_des / 2)
        else:
            pos = np.asarray(init_positions, dtype=float)
        self.compromises = draw_compromises(cfg, init_rng)
        self.comp_by_agent = {c.target: c for c in self.compromises}
        self.comp_state = {c.target: CompromiseState() for c in self.compromises}

        self.x = np.zeros((N, n))
        self.x[:, :D] = pos[:, :D]
        if pos.shape[1] > D:
            self.x[:, D:] = pos[:, D:]
        P0 = self.resid.P_post
        self.Lq = np.linalg.cholesky(m.Q)
        self.Lr = np.linalg.cholesky(m.R)
        init_err = init_rng.standard_normal((N, n)) @ np.linalg.cholesky(P0).T
        if cfg.noiseless:
            init_err[:] = 0.0
        self.xhat = self.x + init_err
        self.P = np.broadcast_to(P0, (N, n, n)).copy()
        self.R_eff = np.broadcast_to(m.R, (N, m.n_outputs, m.n_outputs)).copy()
        self.C_eff = np.broadcast_to(m.C, (N, m.n_outputs, n)).copy()
        self.u = np.zeros((N, m.n_inputs))
        self.goal_state = np.zeros(n)
        self.goal_state[:D] = cfg.goal

        self.recovered = np.zeros(N, dtype=bool)
        self.first_fix = np.zeros(N, dtype=bool)
        self.a_hat = np.full(N, cfg.detector.a_des)
        self.detect_step = np.full(N, -1)
        self.ia_a_hat = np.full((N, N), cfg.detector.a_des)
        self.flagged = np.zeros((N, N), dtype=bool)     # flagged[i, j]: j in V_i^C
        self.prev_bcast_x: np.ndarray | None = None
        self.prev_comm: np.ndarray | None = None
        self.adaptive = AdaptiveCovState(sigma_bar=np.zeros((N, D, D)),
                                         Q_bar=m.Q_pos.copy(), gamma=cfg.gamma,
                                         prev_correction_state=np.zeros((N, n)))
        self.has_prev_fix = np.zeros(N, dtype=bool)
        self._pending_recovery: set[int] = set()
        self.k = 0

    # -- helpers -----------------------------------------------------------
    def _noise(self):
        N, n = self.N, self.n
        nu = self.rng.standard_normal((N, n)) @ self.Lq.T
        eta = self.rng.standard_normal((N, self.model.n_outputs)) @ self.Lr.T
        shadow = self.rng.standard_normal((N, N)) * self.cfg.channel.sigma_shadow
        if self.cfg.noiseless:
            # draws are still consumed so the stream layout does not change
            return np.zeros_like(nu), np.zeros_like(eta), np.zeros_like(shadow)
        return nu, eta, shadow

    def _enter_recovery(self, i: int):
        self.recovered[i] = True
        self.first_fix[i] = True
        self.C_eff[i] = self.C_bar
        self.a_hat[i] = self.cfg.detector.a_des
        # conservative prior: twice the nominal position residual covariance
        sigma0 = 2.0 * self.resid.sigma_pos
        self.adaptive.sigma_bar[i] = sigma0
        self.has_prev_fix[i] = False
        if self.variant == "recovery_robust_R":
            R_bar = extract_R(replace(self.adaptive, sigma_bar=sigma0))
        elif self.variant == "recovery_nonrobust_R":
            R_bar = extract_R_innovation(sigma0, self.P[i, : self.D, : self.D])
        else:
            R_bar = self.model.R[: self.D, : self.D]
        self.R_eff[i] = assemble_R_full(R_bar, self.model.R_rest)

    def _recover(self, idx, k, y, xpred, Ppred, bcast_x, bcast_u, comm, shadow,
                 new_xhat, new_P, n_anchors, cond, clamped, no_fix, R_diag):
        """RSSI fixes and adaptive correction for the recovered agents ``idx``."""
        cfg, m, D = self.cfg, self.model, self.D
        # anchors are extrapolated one step from their broadcasts
        anchor_pred = det.inter_agent_predict(m, bcast_x, bcast_u)[:, :D]
        trusted = comm[idx] & ~self.flagged[idx]
        trusted[np.arange(len(idx)), idx] = False
        n_anchors[idx] = trusted.sum(axis=1)
        dist = pairwise_distances(self.x[:, :D])[idx]
        rx = sample_rssi(np.maximum(dist, 1e-6), cfg.channel, shadow[idx])
        self_pos = xpred[idx, :D].copy()
        self_pos[self.first_fix[idx]] = np.nan
        fixes, fcond, fclamp, ok = batch_position_fix(anchor_pred, rx, trusted,
                                                      cfg.channel, self_pos)
        no_fix[idx] = ~ok
        if not ok.all():
            log.debug("step %d: agents %s lack a fix, predict only", k,
                      idx[~ok].tolist())
        idx, fixes = idx[ok], fixes[ok]
        cond[idx], clamped[idx] = fcond[ok], fclamp[ok]
        if not len(idx):
            return
        y_bar = y[idx].copy()
        y_bar[:, :D] = fixes
        ad = self.adaptive
        sub = replace(ad, sigma_bar=ad.sigma_bar[idx],
                      prev_correction_state=ad.prev_correction_state[idx])
        if self.variant == "recovery_robust_R":
            r_bar = rssi_residual(fixes, sub, m, self.u[idx])
            have = self.has_prev_fix[idx]
            upd = update_residual_covariance(sub, r_bar)
            sub = replace(sub, sigma_bar=np.where(have[:, None, None], upd.sigma_bar,
                                                  sub.sigma_bar))
            self.R_eff[idx] = assemble_R_full(extract_R(sub), m.R_rest)
        elif self.variant == "recovery_nonrobust_R":
            sub = update_residual_covariance(sub, fixes - xpred[idx, :D])
            R_bar = extract_R_innovation(sub.sigma_bar, Ppred[idx, :D, :D], ad.R_floor)
            self.R_eff[idx] = assemble_R_full(R_bar, m.R_rest)
        xu, Pu, _, _ = update_arrays(xpred[idx], Ppred[idx], self.C_eff[idx],
                                     self.R_eff[idx], y_bar)
        new_xhat[idx], new_P[idx] = xu, Pu
        ad.sigma_bar[idx] = sub.sigma_bar
        ad.prev_correction_state[idx] = np.concatenate([fixes, xu[:, D:]], axis=1)
        self.has_prev_fix[idx] = True
        self.first_fix[idx] = False
        R_diag[idx] = np.diagonal(self.R_eff[idx], axis1=1, axis2=2)[:, :D]

    # -- one synchronous round ---------------------------------------------
    def step(self) -> dict:
        cfg, m = self.cfg, self.model
        N, n, D = self.N, self.n, self.D
        k = self.k
        nu, eta, shadow = self._noise()

        # (1) broadcasts carry the estimate and the input from the previous step
        bcast_x = self.xhat.copy()
        bcast_u = self.u.copy()

        # (2) communication graph on true positions
        true_dist = pairwise_distances(self.x[:, :D])
        comm = true_dist <= cfg.channel.delta_c
        np.fill_diagonal(comm, False)

        # (3) consensus control from estimates
        est_dist = pairwise_distances(bcast_x[:, :D])
        S = comm & (est_dist <= cfg.control.delta_u)
        if self.respond:
            S &= ~self.flagged
        u, coincident = formation_control(bcast_x, S, self.goal_state, cfg.control, D)
        if coincident.any():
            log.debug("step %d: coincident neighbor estimates for %s", k,
                      np.nonzero(coincident)[0].tolist())

        # (4) true dynamics
        self.x = self.x @ m.A.T + u @ m.B.T + nu

        # (5) sensing and compromise
        y = self.x @ m.C.T + eta
        for i, spec in self.comp_by_agent.items():
            y[i] = apply_compromise(y[i], self.x[i], spec, k, eta[i, :D], self.comp_state[i])

        # (6) prediction for everyone, nominal correction + on-board detection
        xpred, Ppred = predict_arrays(self.xhat, self.P, m.A, m.B, m.Q, u)
        nominal = ~self.recovered
        alarm = np.zeros(N, dtype=bool)
        anomalous = np.zeros(N, dtype=bool)
        new_xhat = xpred.copy()
        new_P = Ppred.copy()
        if nominal.any():
            idx = np.nonzero(nominal)[0]
            r = y[idx] - np.einsum("ij,kj->ki", m.C, xpred[idx])
            w = np.linalg.solve(self.sigma_pos_chol, r[:, :D].T)
            z = np.einsum("ij,ij->j", w, w)
            alarm[idx] = z > self.tau
            self.a_hat[idx] = det.update_alarm_rate(self.a_hat[idx], alarm[idx].astype(float),
                                                    cfg.detector.ell)
            lo, hi = self.bounds
            anomalous[idx] = (self.a_hat[idx] < lo) | (self.a_hat[idx] > hi)
            xu, Pu, _, _ = update_arrays(xpred[idx], Ppred[idx], self.C_eff[idx],
                                         self.R_eff[idx], y[idx])
            new_xhat[idx], new_P[idx] = xu, Pu
            llo, lhi = self.latch_bounds
            latched = (self.a_hat[idx] < llo) | (self.a_hat[idx] > lhi)
            for i in idx[latched]:
                if self.detect_step[i] < 0:
                    self.detect_step[i] = k
                    log.info("step %d: agent %d detected a position-sensor anomaly", k, i)
                if self.respond:
                    self._pending_recovery.add(int(i))

        # (7) recovered agents: RSSI fix and adaptive correction
        n_anchors = np.zeros(N, dtype=int)
        cond = np.full(N, np.nan)
        clamped = np.zeros(N, dtype=int)
        no_fix = np.zeros(N, dtype=bool)
        R_diag = np.full((N, D), np.nan)
        rec_idx = np.nonzero(self.recovered)[0]
        if len(rec_idx):
            self._recover(rec_idx, k, y, xpred, Ppred, bcast_x, bcast_u, comm, shadow,
                          new_xhat, new_P, n_anchors, cond, clamped, no_fix, R_diag)

        # (8) inter-agent monitoring of broadcasts
        if self.prev_bcast_x is not None:
            r_ia = bcast_x - det.inter_agent_predict(m, self.prev_bcast_x, bcast_u)
            w = np.linalg.solve(self.sigma_ia_pos_chol, r_ia[:, :D].T)
            z_ia = np.einsum("ij,ij->j", w, w)
            hears = comm & self.prev_comm
            alarm_ia = (z_ia > self.tau).astype(float)
            upd = det.update_alarm_rate(self.ia_a_hat, alarm_ia[None, :], cfg.detector.ell)
            self.ia_a_hat = np.where(hears, upd, self.ia_a_hat)
            llo, lhi = self.latch_bounds
            newly = hears & ((self.ia_a_hat < llo) | (self.ia_a_hat > lhi)) & ~self.flagged
            if newly.any():
                for i, j in zip(*np.nonzero(newly)):
                    log.info("step %d: agent %d flags agent %d", k, i, j)
                self.flagged |= newly
        self.prev_bcast_x = bcast_x
        self.prev_comm = comm

        self.xhat, self.P, self.u = new_xhat, new_P, u
        for i in sorted(self._pending_recovery):
            self._enter_recovery(i)
        self._pending_recovery.clear()

        # (9) record
        edges = np.nonzero(np.triu(S | S.T, k=1))
        E = formation_error(self.x[:, :D], zip(*edges), cfg.control.l_des)
        R_diag[~self.recovered] = np.nan
        rec = dict(k=k, true_state=self.x.copy(), estimate=self.xhat.copy(),
                   recovered=self.recovered.copy(), alarm=alarm, a_hat=self.a_hat.copy(),
                   anomalous=anomalous, flagged_by=self.flagged.sum(axis=0),
                   n_anchors=n_anchors, fix_condition=cond, clamped=clamped,
                   no_fix=no_fix, R_diag=R_diag, formation_error=E,
                   coincident=coincident)
        self.k += 1
        return rec


def run_scenario(cfg: ScenarioConfig, variant: str = "recovery_robust_R",
                 seed: int | None = None, init_positions=None,
                 max_steps: int | None = None) -> Trace:
    world = World(cfg, variant, seed, init_positions)
    T = cfg.max_steps if max_steps is None else max_steps
    N, n, D = world.N, world.n, world.D
    buf = {
        "true_state": np.empty((T, N, n)), "estimate": np.empty((T, N, n)),
        "recovered": np.empty((T, N), bool), "alarm": np.empty((T, N), bool),
        "a_hat": np.empty((T, N)), "anomalous": np.empty((T, N), bool),
        "flagged_by": np.empty((T, N), int), "n_anchors": np.empty((T, N), int),
        "fix_condition": np.empty((T, N)), "clamped": np.empty((T, N), int),
        "no_fix": np.empty((T, N), bool), "R_diag": np.empty((T, N, D)),
        "formation_error": np.empty(T), "coincident": np.empty((T, N), bool),
    }
    for t in range(T):
        try:
            rec = world.step()
        except (NumericalError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"step {world.k} ({world.variant}, seed {world.seed}): "
                                 f"{exc}") from exc
        for key, arr in buf.items():
            arr[t] = rec[key]
    return Trace(config=cfg, variant=world.variant, seed=world.seed,
                 compromises=world.compromises, detect_step=world.detect_step.copy(), **buf)
