"""Wireless channel: fading, fluctuated measurements, packet loss and energy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    RngStream,
    sample_rayleigh,
    sample_truncated_normal,
    std_normal_sf,
    truncated_normal_second_moment,
)

BOLTZMANN = 1.38e-23


class NoBracket(ValueError):
    """Requested success probability is unreachable for the channel."""


@dataclass(frozen=True)
class FadingParams:
    """Rayleigh scale and truncated estimation-error parameters.

    Fields may be scalars or per-node arrays that broadcast together.
    """

    sigma_theta: float = 0.5
    sigma_eps: float = 1.0
    delta_eps: float = 0.1

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_theta) <= 0):
            raise ValueError("sigma_theta must be positive")
        if np.any(np.asarray(self.sigma_eps) <= 0):
            raise ValueError("sigma_eps must be positive")
        d = np.asarray(self.delta_eps)
        if np.any(d <= 0) or np.any(d >= 1):
            raise ValueError("delta_eps must lie in (0, 1)")

    def eps_second_moment(self):
        return truncated_normal_second_moment(self.sigma_eps, self.delta_eps)


@dataclass(frozen=True)
class FadingSample:
    theta: np.ndarray | float
    eps: np.ndarray | float
    theta_hat: np.ndarray | float


@dataclass(frozen=True)
class ChannelParams:
    g: float = 1e-15
    l: int = 1000
    r: float = 6000.0
    k_B: float = BOLTZMANN
    temp: float = 280.0

    def __post_init__(self):
        for name in ("g", "r", "k_B", "temp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.l) != self.l or self.l <= 0:
            raise ValueError("packet length l must be a positive integer")

    @classmethod
    def from_db(cls, gain_db: float = -150.0, **kwargs) -> "ChannelParams":
        return cls(g=10.0 ** (gain_db / 10.0), **kwargs)

    @property
    def noise_power(self) -> float:
        return self.r * self.k_B * self.temp


@dataclass(frozen=True)
class LinkDraw:
    """Delivery indicators for one step, ``[i, j] = 1`` when j's packet reached i.

    ``gamma`` is the information-pair round, ``gamma_plus`` the diffusion
    round. Diagonals are always 1.
    """

    gamma: np.ndarray
    gamma_plus: np.ndarray


def ber_bfsk(u, params: ChannelParams):
    """Bit-error rate ``Q(u g / (r k_B T))`` for peak power ``u`` in watts."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("peak power must be non-negative")
    out = std_normal_sf(u * params.g / params.noise_power)
    return float(out) if out.ndim == 0 else out


def packet_success_prob(ber, l: int):
    """``(1 - ber)^l`` evaluated as ``exp(l * log1p(-ber))``."""
    ber = np.asarray(ber, dtype=float)
    if np.any(ber < 0) or np.any(ber > 1):
        raise ValueError("ber must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        out = np.where(ber >= 1.0, 0.0, np.exp(l * np.log1p(-ber)))
    return float(out) if out.ndim == 0 else out


def success_prob_from_power(u, params: ChannelParams):
    return packet_success_prob(ber_bfsk(u, params), params.l)


def power_for_target_prob(q_target: float, params: ChannelParams, tol: float = 1e-12) -> float:
    """Peak power (W) whose packet success probability equals ``q_target``.

    Bisection on ``[0, hi]`` with ``hi`` doubled until it brackets the target.
    """
    if not 0 < q_target < 1:
        raise ValueError("q_target must lie in (0, 1)")
    lo = 0.0
    if success_prob_from_power(lo, params) >= q_target:
        raise NoBracket(f"q={q_target} is already met at zero power")
    hi = params.noise_power / params.g
    for _ in range(200):
        if success_prob_from_power(hi, params) >= q_target:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise NoBracket(f"q={q_target} unreachable for {params}")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        q_mid = success_prob_from_power(mid, params)
        if q_mid < q_target:
            lo = mid
        else:
            hi = mid
        if abs(q_mid - q_target) <= tol or hi - lo <= 4 * np.spacing(hi):
            break
    return 0.5 * (lo + hi)


def sample_fading(params: FadingParams, rng: RngStream, size=None) -> FadingSample:
    """Draw ``theta`` and ``eps`` from independent child streams of ``rng``."""
    theta = sample_rayleigh(params.sigma_theta, rng.child("theta"), size)
    eps = sample_truncated_normal(params.sigma_eps, params.delta_eps, rng.child("eps"), size)
    return FadingSample(theta=theta, eps=eps, theta_hat=(1.0 + eps) * theta)


def apply_fading(y, fs: FadingSample, R_n, rng):
    """Fluctuated measurement ``theta * y + n`` with ``n ~ N(0, R_n)``.

    Uses the true fading coefficient; ``R_n`` is a variance (scalar or per
    element) for the scalar range sensor.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    y = np.asarray(y, dtype=float)
    n = np.sqrt(np.asarray(R_n, dtype=float)) * gen.standard_normal(np.shape(y))
    return fs.theta * y + n


def fading_noise_cov(fp: FadingParams, R_v, R_n, h_vec) -> np.ndarray:
    """Composite measurement-noise covariance under fading.

    ``2 s^2 E[eps^2] h h^T + 2 s^2 R_v + R_n`` with ``s = sigma_theta``.
    """
    h = np.atleast_1d(np.asarray(h_vec, dtype=float))
    m = h.shape[-1]
    R_v = np.broadcast_to(np.asarray(R_v, dtype=float), (m, m)) if np.ndim(R_v) < 2 else np.asarray(R_v)
    R_n = np.broadcast_to(np.asarray(R_n, dtype=float), (m, m)) if np.ndim(R_n) < 2 else np.asarray(R_n)
    two_s2 = 2.0 * float(fp.sigma_theta) ** 2
    delta_R = two_s2 * fp.eps_second_moment() * np.outer(h, h)
    out = delta_R + two_s2 * R_v + R_n
    return 0.5 * (out + out.T)


def sample_link(q, rng, size=None, self_link: bool = False):
    """Bernoulli(q) delivery indicator; self links always deliver."""
    if self_link:
        return np.ones(size, dtype=np.int8) if size is not None else 1
    q = np.asarray(q, dtype=float)
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("q must lie in [0, 1]")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    draw = (gen.random(size if size is not None else q.shape) < q).astype(np.int8)
    return int(draw) if draw.ndim == 0 else draw


def transmission_energy(u, l, r):
    """Energy in joules of one packet: ``u * l / r``."""
    if np.any(np.asarray(u) < 0):
        raise ValueError("peak power must be non-negative")
    return np.asarray(u, dtype=float) * l / r if np.ndim(u) else u * l / r
