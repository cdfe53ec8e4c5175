"""Log-normal shadowing path-loss channel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import proximity_edges
from .errors import InvalidParameterError


@dataclass(frozen=True)
class ChannelParams:
    p_tx: float = 0.0           # dBm
    pl_d0: float = 40.0         # dB at d0
    d0: float = 1.0             # m
    beta: float = 2.0
    sigma2_shadow: float = 2.0  # dB^2, variance of the shadowing term
    delta_c: float = 60.0       # m

    def __post_init__(self):
        if self.d0 <= 0:
            raise InvalidParameterError("d0 must be positive")
        if self.beta <= 0:
            raise InvalidParameterError("beta must be positive")
        if self.sigma2_shadow < 0:
            raise InvalidParameterError("sigma2_shadow must be non-negative")
        if self.delta_c <= 0:
            raise InvalidParameterError("delta_c must be positive")

    @property
    def sigma_shadow(self) -> float:
        return float(np.sqrt(self.sigma2_shadow))


@dataclass(frozen=True)
class RssiSample:
    rx_power: float
    tx_id: int
    rx_id: int
    k: int


def sample_rssi(d, params: ChannelParams, shadow_noise=0.0):
    """Received power in dBm at distance ``d`` (vectorized over ``d``)."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise InvalidParameterError("distance must be positive")
    rx = (params.p_tx - params.pl_d0 - 10.0 * params.beta * np.log10(d / params.d0)
          + np.asarray(shadow_noise, dtype=float))
    return float(rx) if rx.ndim == 0 else rx


def build_comm_graph(positions, delta_c: float) -> set[tuple[int, int]]:
    """Communication edges ``(i, j)``, ``i < j``, between true positions."""
    if delta_c <= 0:
        raise InvalidParameterError("delta_c must be positive")
    return proximity_edges(positions, delta_c)
