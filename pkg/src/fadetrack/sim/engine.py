"""Monte Carlo engine.

Each run draws its world (truth trajectory, fading, noise, link indicators)
once from streams keyed by ``(master_seed, run)`` and then filters it with
every configured variant, so variants are compared on common random numbers.
Runs are independent and are merged in run-index order, which makes the
result independent of the worker count.
"""

from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import dynamics
from ..channel import ChannelParams, FadingParams, success_prob_from_power
from ..filtering import (
    FilterError,
    NetworkModel,
    NetworkState,
    StepInputs,
    Variant,
    draw_step_inputs,
    filter_step,
)
from ..network import Graph, build_graph_from_positions, check_primitivity, is_connected
from ..numerics import NoConvergence, RngStream, pf_left_eigenvector
from .config import ConfigError, ScenarioConfig, initial_covariance, per_node
from .metrics import MetricsReport, build_report


class ExperimentFailed(RuntimeError):
    """More runs aborted than the configured failure threshold allows."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class World:
    """Everything fixed within one run."""

    model: NetworkModel
    motion: dynamics.MotionParams
    channel: ChannelParams
    x0: np.ndarray
    x_hat0: np.ndarray
    P0: np.ndarray


@dataclass
class RunResult:
    run: int
    variant: str
    truth: np.ndarray  # (K + 1, 6)
    estimates: np.ndarray  # (K + 1, N, 6)
    sq_pos_err: np.ndarray  # (K + 1, N)
    sq_vel_err: np.ndarray  # (K + 1, N)
    energy_j: np.ndarray  # (K,)
    attempted: np.ndarray  # (K,)
    delivered_info: np.ndarray  # (K,)
    delivered_diffusion: np.ndarray  # (K,)
    eig_min: np.ndarray  # (K + 1, N)
    eig_max: np.ndarray  # (K + 1, N)
    primitive: np.ndarray  # (K,) bool
    pf_vectors: np.ndarray  # (K, N), NaN rows where indeterminate
    weights: np.ndarray | None = None  # (K, N, N) when requested


@dataclass(frozen=True)
class RunFailure:
    run: int
    variant: str
    step: int | None
    node: int | None
    message: str

    def as_dict(self) -> dict:
        return {"run": self.run, "variant": self.variant, "step": self.step, "node": self.node, "message": self.message}


@dataclass
class MonteCarloResult:
    config: ScenarioConfig
    results: dict = field(default_factory=dict)  # variant -> [RunResult]
    failures: dict = field(default_factory=dict)  # variant -> [RunFailure]
    reports: dict = field(default_factory=dict)  # variant -> MetricsReport

    def failure_rate(self, variant: str) -> float:
        return len(self.failures.get(variant, [])) / self.config.runs


# -- world construction ----------------------------------------------------


def channel_params(cfg: ScenarioConfig) -> ChannelParams:
    ch = cfg.channel
    return ChannelParams.from_db(
        ch.gain_db, l=ch.packet_bits, r=ch.bit_rate_bps, k_B=ch.boltzmann_j_per_k, temp=ch.temperature_k
    )


def motion_params(cfg: ScenarioConfig) -> dynamics.MotionParams:
    return dynamics.MotionParams(omega=cfg.motion.omega_rad_s, T=cfg.period_s, eta_sq=cfg.motion.eta_sq)


def node_positions(cfg: ScenarioConfig, run: int = 0) -> np.ndarray:
    """Explicit positions, or a seeded box placement redrawn until connected."""
    net = cfg.network
    pl = net.placement
    if pl.mode == "explicit":
        return np.asarray(pl.positions_m, dtype=float)
    seed = cfg.master_seed if pl.seed is None else pl.seed
    stream = RngStream(seed, ("placement",))
    if pl.per_run:
        stream = stream.child(run)
    for attempt in range(pl.max_attempts):
        pos = dynamics.place_nodes(net.n_nodes, stream.child(attempt), box=tuple(pl.box_m))
        if not pl.require_connected or net.adjacency is not None:
            return pos
        if is_connected(build_graph_from_positions(pos, net.comm_range_m)):
            return pos
    raise ConfigError(
        f"no connected placement within {pl.max_attempts} attempts; enlarge comm_range_m or the attempt budget",
        "network.placement",
    )


def build_graph(cfg: ScenarioConfig, positions) -> Graph:
    if cfg.network.adjacency is not None:
        return Graph.from_adjacency_list(cfg.network.n_nodes, cfg.network.adjacency)
    return build_graph_from_positions(positions, cfg.network.comm_range_m)


def build_world(cfg: ScenarioConfig, run: int = 0) -> World:
    n = cfg.network.n_nodes
    motion = motion_params(cfg)
    positions = node_positions(cfg, run)
    fading = FadingParams(
        sigma_theta=per_node(cfg.fading.sigma_theta, n, "fading.sigma_theta"),
        sigma_eps=per_node(cfg.fading.sigma_eps, n, "fading.sigma_eps"),
        delta_eps=per_node(cfg.fading.delta_eps, n, "fading.delta_eps"),
    )
    model = NetworkModel(
        F=dynamics.transition_matrix(motion),
        Q=dynamics.process_noise_cov(motion),
        positions=positions,
        R_v=per_node(cfg.sensors.r_v_m2, n, "sensors.r_v_m2"),
        R_n=per_node(cfg.sensors.r_n_m2, n, "sensors.r_n_m2"),
        fading=fading,
        graph=build_graph(cfg, positions),
        kappa=cfg.filter.kappa,
    )
    return World(
        model=model,
        motion=motion,
        channel=channel_params(cfg),
        x0=np.asarray(cfg.initial.truth, dtype=float),
        x_hat0=np.asarray(cfg.initial.estimate, dtype=float),
        P0=initial_covariance(cfg.initial.cov),
    )


def link_levels(cfg: ScenarioConfig, channel: ChannelParams, n: int, rng: RngStream):
    """Per-link success probability and peak power (W) for one step.

    q-mode uses the configured probabilities and reports the nominal power;
    u-mode maps the drawn powers through the BER model. One level per
    directed link serves both communication rounds of the step.
    """
    ln = cfg.links
    if ln.mode == "q":
        if ln.q_range is not None:
            lo, hi = ln.q_range
            q = rng.child("q").generator().uniform(lo, hi, (n, n))
        else:
            q = ln.q
        return q, ln.power_mw * 1e-3
    if ln.power_range_mw is not None:
        lo, hi = ln.power_range_mw
        u = rng.child("u").generator().uniform(lo, hi, (n, n)) * 1e-3
    else:
        u = ln.power_mw * 1e-3
    return success_prob_from_power(u, channel), u


@dataclass
class _StepDraw:
    inputs: StepInputs
    power_w: np.ndarray | float


def draw_run(cfg: ScenarioConfig, world: World, run: int):
    """Truth trajectory and every per-step channel realization of one run."""
    rs = RngStream(cfg.master_seed, ("run", run))
    K = cfg.duration_steps
    truth = dynamics.simulate_truth(world.x0, world.motion, K, rs.child("truth"))
    n = world.model.n_nodes
    draws = []
    for k in range(1, K + 1):
        step = rs.child("step", k)
        q, u = link_levels(cfg, world.channel, n, step.child("links"))
        draws.append(_StepDraw(draw_step_inputs(truth[k], world.model, q, q, step), u))
    return truth, draws


def _pf_or_nan(C, primitive: bool) -> np.ndarray:
    if not primitive:
        return np.full(len(C), np.nan)
    try:
        return pf_left_eigenvector(C, require_primitive=False)
    except NoConvergence:
        return np.full(len(C), np.nan)


def run_variant(cfg: ScenarioConfig, world: World, truth, draws, variant: Variant, run: int, keep_weights: bool = False) -> RunResult:
    model = world.model
    K = len(draws)
    n = model.n_nodes
    adj = model.graph.adjacency
    l_over_r = world.channel.l / world.channel.r
    state = NetworkState.uniform(world.x_hat0, world.P0, n)
    est = np.empty((K + 1, n, 6))
    eig_min = np.empty((K + 1, n))
    eig_max = np.empty((K + 1, n))
    est[0] = state.x
    eig0 = np.linalg.eigvalsh(state.P)
    eig_min[0], eig_max[0] = eig0[:, 0], eig0[:, -1]
    energy = np.empty(K)
    attempted = np.empty(K, dtype=np.int64)
    d_info = np.empty(K, dtype=np.int64)
    d_diff = np.empty(K, dtype=np.int64)
    primitive = np.empty(K, dtype=bool)
    pf = np.empty((K, n))
    weights = np.empty((K, n, n)) if keep_weights else None
    for k, draw in enumerate(draws, start=1):
        try:
            state, tel = filter_step(state, draw.inputs, variant, model)
        except FilterError as exc:
            exc.step = k
            raise
        est[k] = state.x
        eig_min[k], eig_max[k] = tel.eig_min, tel.eig_max
        per_link = np.where(adj, np.broadcast_to(draw.power_w, adj.shape), 0.0)
        # both rounds, every attempted directed transmission
        energy[k - 1] = 2.0 * float(per_link.sum()) * l_over_r
        attempted[k - 1] = tel.attempted
        d_info[k - 1] = tel.delivered_info
        d_diff[k - 1] = tel.delivered_diffusion
        primitive[k - 1] = check_primitivity(tel.C)
        pf[k - 1] = _pf_or_nan(tel.C, primitive[k - 1])
        if keep_weights:
            weights[k - 1] = tel.C
    err = est - truth[:, None, :]
    return RunResult(
        run=run,
        variant=variant.value,
        truth=truth,
        estimates=est,
        sq_pos_err=np.sum(err[..., dynamics.POS] ** 2, axis=-1),
        sq_vel_err=np.sum(err[..., dynamics.VEL] ** 2, axis=-1),
        energy_j=energy,
        attempted=attempted,
        delivered_info=d_info,
        delivered_diffusion=d_diff,
        eig_min=eig_min,
        eig_max=eig_max,
        primitive=primitive,
        pf_vectors=pf,
        weights=weights,
    )


def simulate_run(cfg: ScenarioConfig, run: int, keep_weights: bool = False, world: World | None = None) -> list:
    """All variants of one run; each entry is a RunResult or a RunFailure."""
    if world is None:
        world = build_world(cfg, run)
    truth, draws = draw_run(cfg, world, run)
    out = []
    for variant in cfg.variants():
        try:
            out.append(run_variant(cfg, world, truth, draws, variant, run, keep_weights))
        except np.linalg.LinAlgError as exc:
            out.append(RunFailure(run, variant.value, getattr(exc, "step", None), getattr(exc, "node", None), str(exc)))
    return out


def _run_chunk(args):
    cfg_dict, runs, keep_weights = args
    cfg = ScenarioConfig.from_dict(cfg_dict)
    shared = None if cfg.network.placement.per_run else build_world(cfg, 0)
    return [simulate_run(cfg, r, keep_weights, shared) for r in runs]


def _chunks(runs: int, workers: int):
    # fixed-size contiguous chunks; the merge order never depends on timing
    size = max(1, -(-runs // (4 * workers)))
    return [list(range(s, min(s + size, runs))) for s in range(0, runs, size)]


def run_monte_carlo(cfg: ScenarioConfig, workers: int = 1, keep_weights: bool = False, check_failures: bool = True) -> MonteCarloResult:
    """Run ``cfg.runs`` Monte Carlo runs and aggregate per variant.

    Raises :class:`ExperimentFailed` (with the partial result attached) when
    any variant loses more than ``cfg.failure_threshold`` of its runs.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    # placement problems surface here, before any run starts
    build_world(cfg, 0)
    chunks = _chunks(cfg.runs, workers)
    payload = [(cfg.to_dict(), c, keep_weights) for c in chunks]
    if workers == 1:
        merged = [r for p in payload for r in _run_chunk(p)]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            merged = [r for part in pool.map(_run_chunk, payload) for r in part]

    result = MonteCarloResult(config=cfg)
    for v in cfg.filter.variants:
        result.results[v] = []
        result.failures[v] = []
    for per_run in merged:
        for item in per_run:
            bucket = result.failures if isinstance(item, RunFailure) else result.results
            bucket[item.variant].append(item)
    for v in cfg.filter.variants:
        result.reports[v] = aggregate(cfg, v, result.results[v], len(result.failures[v]))

    if check_failures:
        worst = max(cfg.filter.variants, key=result.failure_rate)
        if result.failure_rate(worst) > cfg.failure_threshold:
            raise ExperimentFailed(
                f"{len(result.failures[worst])}/{cfg.runs} runs of {worst} aborted "
                f"(threshold {cfg.failure_threshold:.2%})",
                result,
            )
    return result


def aggregate(cfg: ScenarioConfig, variant: str, results: list, failed: int) -> MetricsReport:
    K = cfg.duration_steps
    n = cfg.network.n_nodes
    if results:
        sq_pos = np.stack([r.sq_pos_err for r in results])
        sq_vel = np.stack([r.sq_vel_err for r in results])
        energy = np.stack([r.energy_j for r in results])
        attempted = np.stack([r.attempted for r in results])
    else:
        sq_pos = sq_vel = np.empty((0, K + 1, n))
        energy = attempted = np.empty((0, K))
    scalar_power = cfg.links.mode == "q" or cfg.links.power_range_mw is None
    return build_report(
        variant,
        sq_pos,
        sq_vel,
        energy,
        attempted,
        cfg.links.power_mw if scalar_power else None,
        cfg.steady_window_steps,
        K * cfg.period_s,
        cfg.channel,
        runs_failed=failed,
    )
