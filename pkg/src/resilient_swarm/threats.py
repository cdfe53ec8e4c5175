"""Sensor attacks and faults on the position measurements."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

KINDS = ("bias", "ramp_divert", "stuck", "noise_inflation")


@dataclass(frozen=True)
class CompromiseSpec:
    target: int
    start_k: int
    kind: str
    bias: tuple[float, ...] = (0.0, 0.0)
    divert_target: tuple[float, ...] = (0.0, 0.0)
    rate: float = 0.1
    noise_scale: float = 4.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown compromise kind {self.kind!r}")
        if self.start_k < 0:
            raise InvalidParameterError("start_k must be non-negative")
        if self.kind == "ramp_divert" and not self.rate > 0:
            raise InvalidParameterError("ramp_divert needs rate > 0")
        if self.kind == "noise_inflation" and not self.noise_scale > 1:
            raise InvalidParameterError("noise_inflation needs noise_scale > 1")


@dataclass
class CompromiseState:
    """Per-agent memory of an ongoing compromise (ramp offset, frozen reading)."""

    xi: np.ndarray | None = None
    direction: np.ndarray | None = None
    frozen: np.ndarray | None = None


def apply_compromise(y, x_true, spec: CompromiseSpec, k: int, pos_noise,
                     state: CompromiseState | None = None) -> np.ndarray:
    """Return the (possibly) falsified sensor output at step ``k``.

    ``pos_noise`` is the position part of the measurement noise already folded
    into ``y``; only ``noise_inflation`` uses it. ``state`` carries the ramp
    accumulator and frozen values between calls and is updated in place.
    """
    if k < 0:
        raise InvalidParameterError("k must be non-negative")
    if spec.kind not in KINDS:
        raise InvalidParameterError(f"unknown compromise kind {spec.kind!r}")
    y = np.asarray(y, dtype=float)
    if k < spec.start_k:
        return y
    if state is None:
        state = CompromiseState()
    D = len(pos_noise)
    out = y.copy()
    if spec.kind == "bias":
        out[:D] += np.asarray(spec.bias, dtype=float)
    elif spec.kind == "ramp_divert":
        if state.direction is None:
            toward = np.asarray(spec.divert_target, dtype=float) - np.asarray(x_true)[:D]
            norm = np.linalg.norm(toward)
            state.direction = toward / norm if norm > 0 else np.eye(D)[0]
            state.xi = np.zeros(D)
        # measured position runs away from the target so the loop drives the
        # true position toward it
        state.xi = state.xi - spec.rate * state.direction
        out[:D] += state.xi
    elif spec.kind == "stuck":
        if state.frozen is None:
            state.frozen = out[:D].copy()
        out[:D] = state.frozen
    else:
        out[:D] += (spec.noise_scale - 1.0) * np.asarray(pos_noise, dtype=float)
    return out
