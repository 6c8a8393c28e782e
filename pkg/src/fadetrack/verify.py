"""Release-gate property suite run by ``fadetrack verify``.

Each check returns a :class:`PropertyResult` with the measured quantity and
the tolerance it was held to. Checks use their own seeded generators and do
not depend on each other.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import filtering
from .filtering import NetworkState, Variant, filter_step
from .network import Graph, build_graph_from_positions, metropolis_weights
from .numerics import truncated_normal_second_moment


@dataclass
class PropertyResult:
    name: str
    passed: bool
    measured: float | None
    tolerance: float | None
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "measured": self.measured,
            "tolerance": self.tolerance,
            "seconds": round(self.seconds, 3),
            "detail": self.detail,
        }


def random_spd(rng, n: int, cond: float = 1e3, scale: float = 1.0) -> np.ndarray:
    """SPD matrix with eigenvalues log-uniform in ``[scale/cond, scale]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = scale * np.exp(rng.uniform(-np.log(cond), 0.0, n))
    return (Q * eig) @ Q.T


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def if_gain_instance(rng):
    """One random single-node update problem; returns both forms of the result."""
    n = 6
    x_pred = rng.normal(0.0, 100.0, n)
    P_pred = random_spd(rng, n, cond=1e3, scale=100.0)
    pts = filtering.sample_sigma_points(x_pred, P_pred)
    node = rng.uniform(-1000.0, 1000.0, 3)
    theta_hat = rng.uniform(0.3, 1.5)
    z_hat, xi = filtering.predict_measurement(pts, node, theta_hat)
    R = np.array([[rng.uniform(1.0, 100.0)]])
    P_zz, P_xz = filtering.innovation_covariances(pts, xi, x_pred, z_hat, R)
    z = z_hat + rng.normal(0.0, np.sqrt(P_zz[0, 0]), 1)
    pair = filtering.information_pair(P_pred, P_xz, P_zz, z, z_hat)
    fused = filtering.local_fuse(x_pred, P_pred, [(pair, 1)])
    gain = filtering.gain_form_update(x_pred, P_pred, P_xz, P_zz, z, z_hat)
    return fused, gain


def check_if_gain_equivalence(cases: int = 1000, seed: int = 1, tol: float = 1e-10) -> PropertyResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_x = worst_P = 0.0
    for _ in range(cases):
        fused, gain = if_gain_instance(rng)
        worst_x = max(worst_x, _rel(fused.x_hat, gain.x_hat))
        worst_P = max(worst_P, _rel(fused.P_hat, gain.P_hat))
    worst = max(worst_x, worst_P)
    return PropertyResult(
        "if_gain_equivalence", worst <= tol, worst, tol, time.perf_counter() - t0,
        {"cases": cases, "state_rel": worst_x, "cov_rel": worst_P},
    )


def check_sigma_point_linear_exactness(cases: int = 1000, seed: int = 2, tol: float = 1e-9) -> PropertyResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n = 6
        x = rng.normal(0.0, 10.0, n)
        P = random_spd(rng, n, cond=1e4, scale=10.0)
        F = rng.normal(0.0, 1.0, (n, n))
        Q = random_spd(rng, n, cond=1e2)
        kappa = rng.choice([0.0, 1.0, 3.0 - n + 3.5])
        x_pred, P_pred, _ = filtering.predict(x, P, F, Q, kappa)
        worst = max(worst, _rel(x_pred, F @ x), _rel(P_pred, F @ P @ F.T + Q))
    return PropertyResult("sigma_point_linear_exactness", worst <= tol, worst, tol, time.perf_counter() - t0, {"cases": cases})


def quadrature_second_moment(sigma: float, delta: float) -> float:
    """``E[eps^2]`` of the truncated normal by adaptive quadrature."""
    dens = lambda e: np.exp(-0.5 * (e / sigma) ** 2)
    num, _ = integrate.quad(lambda e: e * e * dens(e), -delta, delta, epsabs=0, epsrel=1e-13)
    den, _ = integrate.quad(dens, -delta, delta, epsabs=0, epsrel=1e-13)
    return num / den


def check_moment_quadrature(tol: float = 1e-8) -> PropertyResult:
    t0 = time.perf_counter()
    sigma_theta = 0.5
    rows = []
    worst = 0.0
    for sigma in (1.0, np.sqrt(10.0), np.sqrt(20.0)):
        closed = 2 * sigma_theta**2 * truncated_normal_second_moment(sigma, 0.1)
        quad = 2 * sigma_theta**2 * quadrature_second_moment(sigma, 0.1)
        rel = abs(closed - quad) / quad
        worst = max(worst, rel)
        rows.append({"sigma_eps": sigma, "closed_form": closed, "quadrature": quad, "rel": rel})
    return PropertyResult("moment_quadrature", worst <= tol, worst, tol, time.perf_counter() - t0, {"grid": rows})


def check_covariance_symmetry(model, x0, P0, steps: int = 20, seed: int = 3) -> PropertyResult:
    """Every global covariance produced by the filter is exactly symmetric."""
    from .filtering import draw_step_inputs
    from .numerics import RngStream

    t0 = time.perf_counter()
    state = NetworkState.uniform(x0, P0, model.n_nodes)
    truth = np.asarray(x0, dtype=float)
    asym = 0.0
    root = RngStream(seed, ("symmetry",))
    for k in range(steps):
        truth = model.F @ truth
        inputs = draw_step_inputs(truth, model, 0.5, 0.5, root.child(k))
        for variant in Variant:
            new, _ = filter_step(state, inputs, variant, model)
            asym = max(asym, float(np.max(np.abs(new.P - np.swapaxes(new.P, -1, -2)))))
            if variant is Variant.FC:
                nxt = new
        state = nxt
    return PropertyResult("covariance_symmetry", asym == 0.0, asym, 0.0, time.perf_counter() - t0, {"steps": steps})


def check_metropolis_row_stochastic(cases: int = 200, seed: int = 4, tol: float = 1e-12) -> PropertyResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    negative = False
    for _ in range(cases):
        n = int(rng.integers(2, 30))
        g = build_graph_from_positions(rng.uniform(0, 1000, (n, 3)), rng.uniform(100, 900))
        gp = rng.random((n, n)) < rng.uniform(0, 1)
        C = metropolis_weights(g, gp)
        worst = max(worst, float(np.max(np.abs(C.sum(axis=1) - 1.0))))
        negative |= bool(np.any(C < 0))
    return PropertyResult("metropolis_row_stochastic", worst <= tol and not negative, worst, tol, time.perf_counter() - t0, {"cases": cases})


def bound_diagnostics(cfg, runs: int = 2) -> PropertyResult:
    """Bound and stability diagnostics on a short desk run (report-only apart from positivity)."""
    from .sim import diagnostics
    from .sim.engine import run_monte_carlo

    t0 = time.perf_counter()
    short = cfg.with_overrides([f"runs={min(runs, cfg.runs)}", 'filter.variants=["Fc"]'])
    mc = run_monte_carlo(short, check_failures=False)
    results = mc.results["Fc"]
    bc = diagnostics.default_bound_constants(short)
    detail = {"runs": len(results), "failures": len(mc.failures["Fc"])}
    try:
        p_lo, p_hi = diagnostics.covariance_bounds(bc, short.network.n_nodes)
        band = diagnostics.empirical_bound_check(results, p_lo, p_hi)
        margin = diagnostics.stability_margin(None, bc, short.network.n_nodes, vectors=results[0].pf_vectors) if results else None
        detail["bounds"] = band
        detail["stability"] = None if margin is None else margin.as_dict()
    except diagnostics.InvalidBounds as exc:
        band = diagnostics.empirical_bound_check(results, 0.0, np.inf)
        detail["bounds"] = {"invalid": str(exc), **band}
    positivity = band["positivity_fraction"]
    passed = positivity == 1.0 and not mc.failures["Fc"]
    return PropertyResult("covariance_positivity", passed, positivity, 1.0, time.perf_counter() - t0, detail)


def run_all(cfg) -> list[PropertyResult]:
    from .sim.engine import build_world

    world = build_world(cfg)
    return [
        check_if_gain_equivalence(),
        check_sigma_point_linear_exactness(),
        check_moment_quadrature(),
        check_covariance_symmetry(world.model, world.x_hat0, world.P0),
        check_metropolis_row_stochastic(),
        bound_diagnostics(cfg),
    ]
