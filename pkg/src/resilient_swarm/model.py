"""Discrete-time LTI agent model and the double-integrator instance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidParameterError


@dataclass(frozen=True)
class LtiModel:
    """Shared agent dynamics ``x+ = A x + B u + v`` with output ``y = C x + w``.

    ``dim`` is the position dimension D: the first D states are positions and
    the first D outputs measure them.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    dim: int

    def __post_init__(self):
        for name in ("A", "B", "C", "Q", "R"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise DimensionError(f"B must have {n} rows, got {self.B.shape}")
        if self.C.shape[1] != n:
            raise DimensionError(f"C must have {n} columns, got {self.C.shape}")
        if self.Q.shape != (n, n):
            raise DimensionError(f"Q must be {n}x{n}, got {self.Q.shape}")
        ns = self.C.shape[0]
        if self.R.shape != (ns, ns):
            raise DimensionError(f"R must be {ns}x{ns}, got {self.R.shape}")
        if not (1 <= self.dim <= min(n, ns)):
            raise InvalidParameterError(f"position dimension {self.dim} out of range")
        if not is_spd(self.Q):
            raise InvalidParameterError("Q must be symmetric positive definite")
        if not is_spd(self.R):
            raise InvalidParameterError("R must be symmetric positive definite")
        if np.linalg.matrix_rank(self.C) < ns:
            raise InvalidParameterError("C must have full row rank")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    @property
    def Q_pos(self) -> np.ndarray:
        """Process-noise block of the position states."""
        return self.Q[: self.dim, : self.dim]

    @property
    def R_rest(self) -> np.ndarray:
        """Measurement covariance of the non-position sensors."""
        return self.R[self.dim :, self.dim :]


def is_spd(M: np.ndarray) -> bool:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
        return False
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return True


def build_double_integrator(dt: float, q_pos: float, q_vel: float,
                            r_pos: float, r_vel: float) -> LtiModel:
    """Planar double integrator with state ``[px, py, vx, vy]``, full-state output."""
    for name, val in (("dt", dt), ("q_pos", q_pos), ("q_vel", q_vel),
                      ("r_pos", r_pos), ("r_vel", r_vel)):
        if not val > 0:
            raise InvalidParameterError(f"{name} must be positive, got {val}")
    I2 = np.eye(2)
    Z2 = np.zeros((2, 2))
    A = np.block([[I2, dt * I2], [Z2, I2]])
    B = np.vstack([0.5 * dt**2 * I2, dt * I2])
    C = np.eye(4)
    Q = np.diag([q_pos, q_pos, q_vel, q_vel])
    R = np.diag([r_pos, r_pos, r_vel, r_vel])
    return LtiModel(A=A, B=B, C=C, Q=Q, R=R, dim=2)


def _check_len(vec: np.ndarray, size: int, what: str):
    if vec.shape[-1] != size:
        raise DimensionError(f"{what} must have length {size}, got {vec.shape[-1]}")


def propagate(model: LtiModel, x, u, noise=None) -> np.ndarray:
    """One step of the state recursion. Broadcasts over leading agent axes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_len(x, model.n, "state")
    _check_len(u, model.n_inputs, "input")
    out = x @ model.A.T + u @ model.B.T
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
        _check_len(noise, model.n, "process noise")
        out = out + noise
    return out


def measure(model: LtiModel, x, noise=None) -> np.ndarray:
    """Sensor output ``C x + noise``. Broadcasts over leading agent axes."""
    x = np.asarray(x, dtype=float)
    _check_len(x, model.n, "state")
    y = x @ model.C.T
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
        _check_len(noise, model.n_outputs, "measurement noise")
        y = y + noise
    return y
