"""Covariance bounds and stochastic-stability diagnostics.

The bound constants involve linearization factors that are not observable
from a simulation, so everything here is reported, never enforced, except
the plain positivity of the recorded covariance eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..numerics import NoConvergence, pf_left_eigenvector


class InvalidBounds(ValueError):
    """Bound constants are inconsistent (a lower bound exceeds its upper bound)."""


@dataclass(frozen=True)
class BoundConstants:
    f_lo: float
    f_hi: float
    h_lo: float
    h_hi: float
    beta_lo: float
    beta_hi: float
    theta_lo: float
    theta_hi: float
    q_lo: float
    q_hi: float
    r_v_lo: float
    r_v_hi: float
    r_n_lo: float
    r_n_hi: float
    r_nu_lo: float
    r_nu_hi: float
    delta_eps_hi: float
    # optional explicit bounds on the total measurement noise; derived otherwise
    r_lo: float | None = None
    r_hi: float | None = None

    def __post_init__(self):
        names = [f.name for f in fields(self)]
        for name in names:
            value = getattr(self, name)
            if value is None:
                continue
            if not np.isfinite(value):
                raise InvalidBounds(f"{name} must be finite")
            if value < 0:
                raise InvalidBounds(f"{name} must be non-negative")
        for stem in ("f", "h", "beta", "theta", "q", "r_v", "r_n", "r_nu"):
            lo, hi = getattr(self, f"{stem}_lo"), getattr(self, f"{stem}_hi")
            if lo > hi:
                raise InvalidBounds(f"{stem}_lo={lo} exceeds {stem}_hi={hi}")
        for name in ("f_lo", "h_lo", "beta_lo", "theta_lo", "q_lo"):
            if getattr(self, name) <= 0:
                raise InvalidBounds(f"{name} must be positive")
        if not 0 <= self.delta_eps_hi < 1:
            raise InvalidBounds("delta_eps_hi must lie in [0, 1)")
        if self.r_lo is not None and self.r_hi is not None and self.r_lo > self.r_hi:
            raise InvalidBounds("r_lo exceeds r_hi")

    @property
    def r_lower(self) -> float:
        """Lower bound on the measurement noise seen by the filter."""
        if self.r_lo is not None:
            return self.r_lo
        return 2.0 * self.theta_lo**2 * self.r_v_lo + self.r_n_lo + self.r_nu_lo

    @property
    def r_upper(self) -> float:
        if self.r_hi is not None:
            return self.r_hi
        return 2.0 * self.theta_hi**2 * self.r_v_hi + self.r_n_hi + self.r_nu_hi


def covariance_bounds(bc: BoundConstants, n_nodes: int) -> tuple[float, float]:
    """Lower and upper eigenvalue bounds for the global covariance.

    ``p_lo = 1 / (1/q_lo + (1+D)^2 N h_hi^2 b_hi^2 t_hi^2 / r_lo)`` and
    ``p_hi = h_hi^2 r_hi / ((1-D)^2 h_lo^4 b_lo^2 t_lo^2)`` with ``D`` the
    relative estimation-error bound.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    r_lo, r_hi = bc.r_lower, bc.r_upper
    if r_lo <= 0:
        raise InvalidBounds("noise lower bound must be positive")
    d = bc.delta_eps_hi
    gain = (1.0 + d) ** 2 * n_nodes * bc.h_hi**2 * bc.beta_hi**2 * bc.theta_hi**2 / r_lo
    p_lo = 1.0 / (1.0 / bc.q_lo + gain)
    p_hi = bc.h_hi**2 * r_hi / ((1.0 - d) ** 2 * bc.h_lo**4 * bc.beta_lo**2 * bc.theta_lo**2)
    if p_lo > p_hi:
        raise InvalidBounds(f"lower bound {p_lo:.6g} exceeds upper bound {p_hi:.6g}")
    return p_lo, p_hi


def stability_threshold(bc: BoundConstants, p_hi: float) -> float:
    return 1.0 + bc.q_lo / (bc.f_hi**2 * p_hi)


@dataclass
class StabilityReport:
    ratios: np.ndarray  # (steps - 1,), NaN where indeterminate
    threshold: float
    passed: list  # True / False / None (indeterminate) per ratio

    @property
    def n_indeterminate(self) -> int:
        return sum(p is None for p in self.passed)

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "ratios": [None if not np.isfinite(r) else float(r) for r in self.ratios],
            "passed": self.passed,
            "max_ratio": None if not np.isfinite(self.ratios).any() else float(np.nanmax(self.ratios)),
            "indeterminate": self.n_indeterminate,
        }


def pf_vectors(C_seq) -> np.ndarray:
    """Left Perron vectors of each matrix; NaN rows when not computable."""
    out = []
    for C in C_seq:
        C = np.asarray(C, dtype=float)
        try:
            out.append(pf_left_eigenvector(C))
        except (NoConvergence, ValueError):
            out.append(np.full(len(C), np.nan))
    return np.array(out)


def stability_margin(C_seq, bc: BoundConstants, n_nodes: int | None = None, vectors=None) -> StabilityReport:
    """Ratios ``max_j c_{k+1}^j / c_k^j`` against ``1 + q_lo / (f_hi^2 p_hi)``.

    ``vectors`` may supply precomputed Perron vectors (NaN rows for failed
    computations); otherwise they are computed from ``C_seq``.
    """
    c = pf_vectors(C_seq) if vectors is None else np.asarray(vectors, dtype=float)
    n = c.shape[1] if n_nodes is None else n_nodes
    _, p_hi = covariance_bounds(bc, n)
    threshold = stability_threshold(bc, p_hi)
    if len(c) < 2:
        return StabilityReport(np.empty(0), threshold, [])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.max(c[1:] / c[:-1], axis=1)
    ratios = np.where(np.isfinite(ratios), ratios, np.nan)
    passed = [None if np.isnan(r) else bool(r <= threshold) for r in ratios]
    return StabilityReport(ratios, threshold, passed)


def empirical_bound_check(results, p_lo: float, p_hi: float) -> dict:
    """Count ``(run, step, node)`` triples whose covariance spectrum lies in the band.

    ``results`` is an iterable of objects with ``eig_min`` and ``eig_max``
    arrays. The initial covariance is included.
    """
    lo = np.concatenate([np.ravel(r.eig_min) for r in results]) if results else np.empty(0)
    hi = np.concatenate([np.ravel(r.eig_max) for r in results]) if results else np.empty(0)
    total = lo.size
    inside = int(np.sum((lo >= p_lo) & (hi <= p_hi)))
    positive = int(np.sum(lo > 0))
    return {
        "p_lower": p_lo,
        "p_upper": p_hi,
        "triples": total,
        "inside_band": inside,
        "fraction_inside": inside / total if total else 1.0,
        "positive": positive,
        "positivity_fraction": positive / total if total else 1.0,
        "min_eigenvalue": float(lo.min()) if total else None,
        "max_eigenvalue": float(hi.max()) if total else None,
    }


def divergence_ratio(results, window: int) -> float:
    """Max largest eigenvalue over the last ``window`` steps / over the first ``window``."""
    hi = np.stack([r.eig_max for r in results])  # (runs, K + 1, N)
    late = hi[:, -window:].max()
    early = hi[:, 1 : window + 1].max()
    return float(late / early)


def default_bound_constants(cfg, world=None, truth=None) -> BoundConstants:
    """Heuristic constants for a scenario.

    ``f`` bounds are the extreme singular values of the transition matrix;
    a range sensor has a unit-norm gradient so ``h_lo = h_hi = 1``; ``beta``
    is set to 1; fading bounds are the Rayleigh quantiles at 1e-6 and
    1 - 1e-6; ``q`` bounds come from the process noise spectrum and the
    fading-error noise uses the range spread of the noiseless trajectory.
    """
    from .engine import build_world  # avoid a cycle at import time
    from .. import dynamics

    if world is None:
        world = build_world(cfg)
    model = world.model
    sv = np.linalg.svd(model.F, compute_uv=False)
    q_eig = np.linalg.eigvalsh(model.Q)
    sigma = np.asarray(model.sigma_theta)
    tail = 1e-6
    theta_lo = float(np.min(sigma) * np.sqrt(-2.0 * np.log1p(-tail)))
    theta_hi = float(np.max(sigma) * np.sqrt(-2.0 * np.log(tail)))
    if truth is None:
        quiet = dynamics.MotionParams(world.motion.omega, world.motion.T, 0.0)
        truth = dynamics.simulate_truth(world.x0, quiet, cfg.duration_steps, np.random.default_rng(0))
    ranges = dynamics.range_measurement(truth[:, None, :], model.positions)
    m2 = 2.0 * sigma**2 * np.asarray(model.eps_m2)
    r_nu = m2[None, :] * ranges**2
    d_eps = float(np.max(np.asarray(model.fading.delta_eps)))
    return BoundConstants(
        f_lo=float(sv.min()),
        f_hi=float(sv.max()),
        h_lo=1.0,
        h_hi=1.0,
        beta_lo=1.0,
        beta_hi=1.0,
        theta_lo=theta_lo,
        theta_hi=theta_hi,
        q_lo=float(max(q_eig.min(), np.finfo(float).tiny)),
        q_hi=float(q_eig.max()),
        r_v_lo=float(np.min(model.R_v)),
        r_v_hi=float(np.max(model.R_v)),
        r_n_lo=float(np.min(model.R_n)),
        r_n_hi=float(np.max(model.R_n)),
        r_nu_lo=float(r_nu.min()),
        r_nu_hi=float(r_nu.max()),
        delta_eps_hi=d_eps,
    )
