"""Target motion and the range-only sensor.

State layout is ``[x, vx, y, vy, z, vz]``: a constant-turn model in the
horizontal plane and constant velocity along z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .numerics import RngStream, matrix_sqrt_psd

STATE_DIM = 6
POS = np.array([0, 2, 4])
VEL = np.array([1, 3, 5])

# below this |omega*T| the constant-turn entries switch to their Taylor limits
SMALL_TURN = 1e-8


@dataclass(frozen=True)
class MotionParams:
    omega: float = 0.52
    T: float = 1.0
    eta_sq: float = 5.0

    def __post_init__(self):
        if self.T == 0 or not np.isfinite(self.T):
            raise ValueError("sampling period T must be finite and non-zero")
        if self.eta_sq < 0:
            raise ValueError("eta_sq must be non-negative")


@dataclass(frozen=True)
class SensorNode:
    id: int
    position: tuple
    R_v: float
    R_n: float = 0.0

    def __post_init__(self):
        if self.R_v <= 0:
            raise ValueError(f"node {self.id}: R_v must be positive")
        if self.R_n < 0:
            raise ValueError(f"node {self.id}: R_n must be non-negative")


def _turn_terms(omega: float, T: float):
    """Return sin(wT)/w, (1-cos(wT))/w, cos(wT), sin(wT)."""
    wt = omega * T
    if abs(wt) < SMALL_TURN:
        wt2 = wt * wt
        s_over_w = T * (1.0 - wt2 / 6.0 + wt2 * wt2 / 120.0)
        c_over_w = omega * T * T * (0.5 - wt2 / 24.0)
        cos_wt = 1.0 - wt2 / 2.0 + wt2 * wt2 / 24.0
        sin_wt = wt * (1.0 - wt2 / 6.0)
        return s_over_w, c_over_w, cos_wt, sin_wt
    return np.sin(wt) / omega, (1.0 - np.cos(wt)) / omega, np.cos(wt), np.sin(wt)


def transition_matrix(params: MotionParams) -> np.ndarray:
    s_w, c_w, c, s = _turn_terms(params.omega, params.T)
    F0 = np.array(
        [
            [1.0, s_w, 0.0, -c_w],
            [0.0, c, 0.0, -s],
            [0.0, c_w, 1.0, s_w],
            [0.0, s, 0.0, c],
        ]
    )
    F1 = np.array([[1.0, params.T], [0.0, 1.0]])
    return block_diag(F0, F1)


def process_noise_cov(params: MotionParams) -> np.ndarray:
    T = params.T
    Q0 = params.eta_sq * np.array([[T**3 / 3.0, T**2 / 2.0], [T**2 / 2.0, T]])
    return block_diag(Q0, Q0, Q0)


def _noise_factor(Q: np.ndarray) -> np.ndarray:
    if not Q.any():
        return np.zeros_like(Q)
    return matrix_sqrt_psd(Q)


def propagate_truth(x, params: MotionParams, rng) -> np.ndarray:
    """One step ``F x + w`` with ``w ~ N(0, Q)``."""
    F = transition_matrix(params)
    L = _noise_factor(process_noise_cov(params))
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return F @ np.asarray(x, dtype=float) + L @ gen.standard_normal(STATE_DIM)


def simulate_truth(x0, params: MotionParams, steps: int, rng) -> np.ndarray:
    """Trajectory ``(steps + 1, 6)`` starting at ``x0``; one stream for all steps."""
    F = transition_matrix(params)
    L = _noise_factor(process_noise_cov(params))
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    w = gen.standard_normal((steps, STATE_DIM)) @ L.T
    out = np.empty((steps + 1, STATE_DIM))
    out[0] = x0
    for k in range(steps):
        out[k + 1] = F @ out[k] + w[k]
    return out


def _node_position(node) -> np.ndarray:
    if isinstance(node, SensorNode):
        return np.asarray(node.position, dtype=float)
    return np.asarray(node, dtype=float)


def range_measurement(x, node) -> np.ndarray | float:
    """Euclidean distance from target position(s) to the node.

    ``x`` may be a single state or any stack ``(..., 6)``; ``node`` is a
    :class:`SensorNode` or a position broadcastable against ``(..., 3)``.
    """
    x = np.asarray(x, dtype=float)
    d = x[..., POS] - _node_position(node)
    r = np.sqrt(np.sum(d * d, axis=-1))
    return float(r) if r.ndim == 0 else r


def ideal_measurement(x, node: SensorNode, rng, size=None):
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    noise = np.sqrt(node.R_v) * gen.standard_normal(size)
    return range_measurement(x, node) + noise


def place_nodes(n: int, rng, box=(1000.0, 1000.0, 1500.0)) -> np.ndarray:
    """Uniform placement in ``[0, bx] x [0, by] x [-bz, 0]`` (z below the surface)."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    bx, by, bz = box
    u = gen.random((n, 3))
    return np.column_stack([u[:, 0] * bx, u[:, 1] * by, -u[:, 2] * bz])
