"""Numerical primitives shared by the filter and the simulator.

Everything here is a pure function of its inputs. Random draws go through
:class:`RngStream`, a value object that maps ``(master_seed, stream_id)`` onto
an independent numpy ``Generator``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import special


class NotFactorizable(np.linalg.LinAlgError):
    """Cholesky failed even after the jitter retries (covariance collapse)."""


class NoConvergence(RuntimeError):
    """Power iteration did not reach the requested fixed-point residual."""


def tag(name: str | int) -> int:
    """Stable 32-bit integer for a purpose tag (strings hashed with CRC32)."""
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError("stream id components must be non-negative")
        return int(name)
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream identified by a seed and an id tuple.

    Identical ``(master_seed, stream_id)`` pairs always give identical draw
    sequences, independent of process or thread. Distinct ids are spawned as
    separate ``SeedSequence`` children and are statistically independent.
    """

    master_seed: int
    stream_id: tuple = ()

    def child(self, *parts: str | int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_id + tuple(tag(p) for p in parts))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.master_seed) & (2**64 - 1),
            spawn_key=tuple(tag(p) for p in self.stream_id),
        )
        return np.random.Generator(np.random.PCG64(ss))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def matrix_sqrt_psd(M, jitter: float | None = None, retries: int = 3) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == M``.

    Accepts a stack of matrices (``(..., n, n)``). When the plain Cholesky
    factorization fails, ``jitter * I`` is added and the jitter is multiplied
    by 10 on each of up to ``retries`` further attempts. The default jitter is
    ``1e-12 * trace(M) / n``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2] or M.shape[-1] < 1:
        raise ValueError(f"expected square matrix, got shape {M.shape}")
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    if M.ndim > 2:
        flat = M.reshape(-1, *M.shape[-2:])
        out = np.empty_like(flat)
        for idx, m in enumerate(flat):
            out[idx] = matrix_sqrt_psd(m, jitter, retries)
        return out.reshape(M.shape)

    n = M.shape[-1]
    if jitter is None:
        scale = np.trace(M) / n
        jitter = 1e-12 * scale if np.isfinite(scale) and scale > 0 else 1e-12
    eye = np.eye(n)
    for _ in range(retries):
        try:
            return np.linalg.cholesky(M + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotFactorizable(f"matrix not factorizable after {retries} jitter retries (last jitter {jitter / 10:.3g})")


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def std_normal_cdf(x):
    return special.ndtr(x)


def std_normal_sf(x):
    """Upper tail ``1 - cdf(x)``, accurate far into the tail."""
    return special.ndtr(-np.asarray(x, dtype=float))


def rayleigh_from_uniform(u, sigma):
    """Invert the Rayleigh CDF ``1 - exp(-x^2 / (2 sigma^2))``."""
    u = np.asarray(u, dtype=float)
    return sigma * np.sqrt(-2.0 * np.log1p(-u))


def sample_rayleigh(sigma, rng, size=None):
    """Rayleigh draw with scale ``sigma`` (so that ``E[x^2] = 2 sigma^2``)."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    gen = _as_generator(rng)
    # 1 - u lies in (0, 1], keeping the draw strictly positive
    u = 1.0 - gen.random(size)
    x = sigma * np.sqrt(-2.0 * np.log(u))
    return np.where(x > 0, x, np.finfo(float).tiny * np.asarray(sigma))


def truncated_normal_from_uniform(u, sigma, delta):
    """Map ``u`` in [0, 1) to a zero-mean normal truncated to [-delta, delta].

    Uses the symmetric quantile ``sigma*sqrt(2)*erfinv((2u-1)*erf(a/sqrt(2)))``
    with ``a = delta/sigma``; erf keeps full precision for tiny intervals.
    """
    u = np.asarray(u, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    delta = np.asarray(delta, dtype=float)
    mass = special.erf(delta / (sigma * np.sqrt(2.0)))
    x = sigma * np.sqrt(2.0) * special.erfinv((2.0 * u - 1.0) * mass)
    return np.clip(x, -delta, delta)


def sample_truncated_normal(sigma, delta, rng, size=None):
    """Zero-mean normal with scale ``sigma`` conditioned on [-delta, delta]."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    if np.any(np.asarray(delta) <= 0) or np.any(np.asarray(delta) >= 1):
        raise ValueError("delta must lie in (0, 1)")
    gen = _as_generator(rng)
    return truncated_normal_from_uniform(gen.random(size), sigma, delta)


def truncated_normal_second_moment(sigma, delta):
    """``E[eps^2]`` for eps ~ N(0, sigma^2) truncated to [-delta, delta].

    Closed form ``sigma^2 (1 - delta*phi(a) / (sigma*Phi(a) - sigma/2))`` with
    ``a = delta / sigma``, evaluated as the equivalent ratio of regularized
    lower incomplete gamma functions ``P(3/2, a^2/2) / P(1/2, a^2/2)`` so that
    the ``sigma >> delta`` regime does not cancel catastrophically.
    """
    sigma = np.asarray(sigma, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(sigma <= 0) or np.any(delta <= 0):
        raise ValueError("sigma and delta must be positive")
    half_a2 = 0.5 * (delta / sigma) ** 2
    out = sigma**2 * special.gammainc(1.5, half_a2) / special.gammainc(0.5, half_a2)
    return float(out) if out.ndim == 0 else out


def is_primitive(C) -> bool:
    """Wielandt test: the support of ``C^((n-1)^2 + 1)`` is all positive."""
    A = (np.asarray(C) > 0).astype(np.int64)
    n = A.shape[0]
    power = (n - 1) ** 2 + 1
    result = np.eye(n, dtype=np.int64)
    base = A
    while power:
        if power & 1:
            result = np.minimum(result @ base, 1)
        base = np.minimum(base @ base, 1)
        power >>= 1
    return bool(result.all())


def pf_left_eigenvector(C, tol: float = 1e-10, max_iter: int = 100_000, require_primitive: bool = True):
    """Probability vector ``c`` with ``c @ C == c`` for row-stochastic ``C``.

    Power iteration on ``C.T`` accelerated by repeated squaring: iteration ``t``
    applies ``C^(2^t)``, so ``max_iter`` bounds the number of matrix products,
    not the effective power. Non-primitive matrices have no unique positive
    fixed point and raise :class:`NoConvergence` unless ``require_primitive``
    is False.
    """
    C = np.asarray(C, dtype=float)
    n = C.shape[0]
    if C.shape != (n, n):
        raise ValueError("C must be square")
    if np.any(C < 0) or np.max(np.abs(C.sum(axis=1) - 1.0)) > 1e-12:
        raise ValueError("C must be non-negative and row-stochastic")
    if require_primitive and not is_primitive(C):
        raise NoConvergence("matrix is not primitive; the left Perron vector is not unique")

    c = np.full(n, 1.0 / n)
    M = C.copy()
    for _ in range(max_iter):
        if np.max(np.abs(c @ C - c)) <= tol:
            return c
        c = c @ M
        c /= c.sum()
        M = M @ M
        M /= M.sum(axis=1, keepdims=True)
    if np.max(np.abs(c @ C - c)) <= tol:
        return c
    raise NoConvergence(f"residual above {tol} after {max_iter} iterations")
