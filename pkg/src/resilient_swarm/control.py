"""Proximity-based formation control with a virtual spring-damper mesh."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

log = logging.getLogger(__name__)

COINCIDENT_EPS = 1e-9


@dataclass(frozen=True)
class ControlParams:
    l_des: float = 8.0
    delta_u: float = 10.0
    k_s: float = 1.0
    k_d: float = 0.5
    k_g: float = 0.1
    c_v: float = 0.8
    u_max: float = 2.0

    def __post_init__(self):
        if self.l_des <= 0:
            raise InvalidParameterError("l_des must be positive")
        if self.delta_u < self.l_des:
            raise InvalidParameterError("delta_u must be at least l_des")
        if self.u_max <= 0:
            raise InvalidParameterError("u_max must be positive")
        for name in ("k_s", "k_d", "k_g", "c_v"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be non-negative")


@dataclass
class ControlGraph:
    n_agents: int
    edges: set[tuple[int, int]] = field(default_factory=set)

    @property
    def neighbor_sets(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_agents)]
        for i, j in sorted(self.edges):
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [sorted(s) for s in nbrs]


def pairwise_distances(positions) -> np.ndarray:
    p = np.asarray(positions, dtype=float)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def proximity_edges(positions, radius: float) -> set[tuple[int, int]]:
    """Unordered pairs ``(i, j)``, ``i < j``, no farther apart than ``radius``."""
    p = np.asarray(positions, dtype=float)
    if len(p) < 2:
        return set()
    dist = pairwise_distances(p)
    ii, jj = np.nonzero(np.triu(dist <= radius, k=1))
    return set(zip(ii.tolist(), jj.tolist()))


def build_control_graph(positions, delta_u: float) -> ControlGraph:
    if delta_u <= 0:
        raise InvalidParameterError("delta_u must be positive")
    positions = np.asarray(positions, dtype=float)
    return ControlGraph(len(positions), proximity_edges(positions, delta_u))


def _unit_vectors(diff: np.ndarray, dist: np.ndarray):
    """Unit vectors along ``diff``; coincident pairs get +x and are reported."""
    coincident = dist < COINCIDENT_EPS
    safe = np.where(coincident, 1.0, dist)
    unit = diff / safe[..., None]
    if np.any(coincident):
        fallback = np.zeros(diff.shape[-1])
        fallback[0] = 1.0
        unit[coincident] = fallback
    return unit, coincident


def spring_damper_control(self_est, neighbor_ests, x_ref, params: ControlParams,
                          dim: int = 2) -> np.ndarray:
    """Control input of a single agent from its estimate and its neighbors'.

    Springs pull or push each neighbor toward ``l_des``, dampers align
    velocities, and a goal spring plus velocity damping track ``x_ref``.
    The result is clamped per axis to ``u_max``.
    """
    x = np.asarray(self_est, dtype=float)
    p, v = x[:dim], x[dim:2 * dim]
    ref = np.asarray(x_ref, dtype=float)
    u = params.k_g * (ref[:dim] - p) - params.c_v * v
    nbrs = np.asarray(neighbor_ests, dtype=float).reshape(-1, x.shape[0])
    if len(nbrs):
        diff = nbrs[:, :dim] - p
        dist = np.linalg.norm(diff, axis=1)
        unit, coincident = _unit_vectors(diff, dist)
        if coincident.any():
            log.warning("coincident neighbor position; spring uses +x direction")
        spring = params.k_s * ((dist - params.l_des)[:, None] * unit).sum(axis=0)
        damper = params.k_d * (nbrs[:, dim:2 * dim] - v).sum(axis=0)
        u = u + spring + damper
    return np.clip(u, -params.u_max, params.u_max)


def formation_control(estimates, neighbor_mask, x_ref, params: ControlParams,
                      dim: int = 2):
    """Vectorized ``spring_damper_control`` for every agent at once.

    ``neighbor_mask[i, j]`` selects j as a control neighbor of i. Returns the
    input array and a boolean per agent flagging a coincident neighbor.
    """
    x = np.asarray(estimates, dtype=float)
    p, v = x[:, :dim], x[:, dim:2 * dim]
    mask = np.asarray(neighbor_mask, dtype=bool)
    diff = p[None, :, :] - p[:, None, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    unit, coincident = _unit_vectors(diff, dist)
    stretch = np.where(mask, dist - params.l_des, 0.0)
    spring = params.k_s * np.einsum("ij,ijk->ik", stretch, unit)
    dv = v[None, :, :] - v[:, None, :]
    damper = params.k_d * np.einsum("ij,ijk->ik", mask.astype(float), dv)
    ref = np.asarray(x_ref, dtype=float)[:dim]
    u = params.k_g * (ref - p) - params.c_v * v + spring + damper
    return np.clip(u, -params.u_max, params.u_max), (coincident & mask).any(axis=1)
