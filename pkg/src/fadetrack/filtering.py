"""Distributed unscented Kalman filter over fading channels.

Node-level operations accept a single node (``x`` of shape ``(n,)``) or a
stack of nodes (``(N, n)``), so :func:`filter_step` runs the whole network in
one pass. Each step has three phases: sigma-point prediction, local fusion
of the information pairs that arrived, and diffusion of local estimates with
Metropolis weights.

Variants differ only in what the filter believes about the channel:

``Fc``
    scales predictions by the estimated coefficient and inflates the noise
    covariance for fading and estimation error.
``eFc``
    knows the true coefficient, so there is no estimation-error term.
``nFc``
    ignores fading altogether (no scaling, no inflation).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import dynamics
from .channel import FadingParams, apply_fading, sample_fading
from .network import Graph, metropolis_weights
from .numerics import NotFactorizable, RngStream, matrix_sqrt_psd


class Variant(str, Enum):
    FC = "Fc"
    EFC = "eFc"
    NFC = "nFc"


class FilterError(np.linalg.LinAlgError):
    """Numerical failure inside the filter, optionally tagged with node/step."""

    def __init__(self, message, node=None, step=None):
        super().__init__(message)
        self.node = node
        self.step = step

    def __str__(self):
        where = []
        if self.step is not None:
            where.append(f"step {self.step}")
        if self.node is not None:
            where.append(f"node {self.node}")
        base = super().__str__()
        return f"{base} ({', '.join(where)})" if where else base


class SingularInnovation(FilterError):
    pass


class SingularR(FilterError):
    pass


class SingularCovariance(FilterError):
    pass


class InvalidScaling(ValueError):
    pass


@dataclass
class NodeEstimate:
    x_hat: np.ndarray
    P_hat: np.ndarray


@dataclass
class SigmaPointSet:
    points: np.ndarray  # (..., 2n+1, n)
    weights: np.ndarray  # (2n+1,)
    kappa: float


@dataclass
class InformationPair:
    omega_mat: np.ndarray  # (..., n, n)
    omega_vec: np.ndarray  # (..., n)


def _symmetrize(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _first_bad(flags) -> int | None:
    bad = np.flatnonzero(~np.asarray(flags).reshape(-1))
    return int(bad[0]) if bad.size else None


def _spd_inverse(P, exc=SingularCovariance, what="covariance"):
    """Inverse of SPD matrices through their Cholesky factor."""
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        node = None
        if P.ndim > 2:
            flat = P.reshape(-1, *P.shape[-2:])
            ok = [np.all(np.linalg.eigvalsh(_symmetrize(p)) > 0) for p in flat]
            node = _first_bad(ok)
        raise exc(f"{what} is not positive definite", node=node) from None
    Linv = np.linalg.inv(L)
    return _symmetrize(np.swapaxes(Linv, -1, -2) @ Linv)


def sigma_weights(n: int, kappa: float = 0.0) -> np.ndarray:
    if n + kappa <= 0:
        raise InvalidScaling(f"n + kappa must be positive (n={n}, kappa={kappa})")
    w = np.full(2 * n + 1, 1.0 / (2.0 * n + 2.0 * kappa))
    w[0] = kappa / (n + kappa)
    return w


def sample_sigma_points(x, P=None, kappa: float = 0.0, jitter: float | None = None) -> SigmaPointSet:
    """``2n+1`` points: the mean and the mean +/- columns of ``sqrt((n+kappa) P)``."""
    if isinstance(x, NodeEstimate):
        x, P = x.x_hat, x.P_hat
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    w = sigma_weights(n, kappa)
    try:
        L = matrix_sqrt_psd((n + kappa) * np.asarray(P, dtype=float), jitter=jitter)
    except NotFactorizable as e:
        raise SingularCovariance(str(e)) from None
    cols = np.swapaxes(L, -1, -2)  # row s holds column s of L
    points = np.concatenate([x[..., None, :], x[..., None, :] + cols, x[..., None, :] - cols], axis=-2)
    return SigmaPointSet(points=points, weights=w, kappa=kappa)


def predict(x, P, F, Q, kappa: float = 0.0):
    """Propagate sigma points through ``F``; return ``(x_pred, P_pred, points)``."""
    sp = sample_sigma_points(x, P, kappa)
    pts = sp.points @ np.asarray(F).T
    w = sp.weights
    x_pred = np.einsum("s,...si->...i", w, pts)
    dev = pts - x_pred[..., None, :]
    P_pred = np.einsum("s,...si,...sj->...ij", w, dev, dev) + Q
    return x_pred, _symmetrize(P_pred), SigmaPointSet(pts, w, kappa)


def predict_measurement(points: SigmaPointSet, node, theta_hat=1.0):
    """Range predictions ``xi_s = theta_hat * h(X_s)`` and their weighted mean.

    ``node`` is a position ``(3,)``, a stack ``(N, 3)`` matching the leading
    axis of the points, or a :class:`~fadetrack.dynamics.SensorNode`.
    Returns ``(z_hat (..., 1), xi (..., 2n+1, 1))``.
    """
    if isinstance(node, dynamics.SensorNode):
        pos = np.asarray(node.position, dtype=float)
    else:
        pos = np.asarray(node, dtype=float)
    h = dynamics.range_measurement(points.points, pos[..., None, :])
    xi = (np.asarray(theta_hat, dtype=float)[..., None] * h)[..., None]
    z_hat = np.einsum("s,...sm->...m", points.weights, xi)
    return z_hat, xi


def innovation_covariances(points: SigmaPointSet, xi, x_pred, z_hat, R_nu_hat):
    """``(P_zz, P_xz)`` from the propagated points and measurement points."""
    w = points.weights
    dz = xi - z_hat[..., None, :]
    dx = points.points - x_pred[..., None, :]
    P_zz = np.einsum("s,...sa,...sb->...ab", w, dz, dz) + R_nu_hat
    P_xz = np.einsum("s,...si,...sa->...ia", w, dx, dz)
    return _symmetrize(P_zz), P_xz


def information_pair(P_pred, P_xz, P_zz, z, z_hat, P_pred_inv=None) -> InformationPair:
    """Information-form contribution of one measurement.

    ``H = P_xz^T P_pred^-1``, ``R = P_zz - P_xz^T P_pred^-1 P_xz``;
    the pair is ``(H^T R^-1 H, H^T R^-1 (z - z_hat))``.
    """
    if P_pred_inv is None:
        P_pred_inv = _spd_inverse(P_pred)
    H = np.swapaxes(P_xz, -1, -2) @ P_pred_inv  # (..., m, n)
    R = _symmetrize(P_zz - H @ P_xz)
    R_inv = _spd_inverse(R, SingularR, "pseudo measurement covariance")
    HtRinv = np.swapaxes(H, -1, -2) @ R_inv  # (..., n, m)
    innov = np.asarray(z, dtype=float) - np.asarray(z_hat, dtype=float)
    omega_mat = _symmetrize(HtRinv @ H)
    omega_vec = (HtRinv @ innov[..., None])[..., 0]
    return InformationPair(omega_mat, omega_vec)


def gain_form_update(x_pred, P_pred, P_xz, P_zz, z, z_hat) -> NodeEstimate:
    """Kalman-gain update ``K = P_xz P_zz^-1`` (reference form of the update)."""
    P_zz_inv = _spd_inverse(P_zz, SingularInnovation, "innovation covariance")
    K = P_xz @ P_zz_inv
    innov = np.asarray(z, dtype=float) - np.asarray(z_hat, dtype=float)
    x = x_pred + (K @ innov[..., None])[..., 0]
    P = P_pred - K @ P_zz @ np.swapaxes(K, -1, -2)
    return NodeEstimate(x, _symmetrize(P))


def _fuse(x_pred, P_pred_inv, info_mat, info_vec):
    Y = _symmetrize(P_pred_inv + info_mat)
    P_local = _spd_inverse(Y, SingularCovariance, "fused information matrix")
    x_local = x_pred + (P_local @ info_vec[..., None])[..., 0]
    return x_local, P_local


def local_fuse(x_pred, P_pred, pairs) -> NodeEstimate:
    """Fuse the information pairs that arrived at one node.

    ``pairs`` is a sequence of ``(InformationPair, gamma)``; pairs with
    ``gamma == 0`` were lost in transit and contribute nothing.
    """
    P_pred = np.asarray(P_pred, dtype=float)
    n = P_pred.shape[-1]
    info_mat = np.zeros((n, n))
    info_vec = np.zeros(n)
    for pair, gamma in pairs:
        if gamma:
            info_mat = info_mat + pair.omega_mat
            info_vec = info_vec + pair.omega_vec
    x_local, P_local = _fuse(np.asarray(x_pred, dtype=float), _spd_inverse(P_pred), info_mat, info_vec)
    return NodeEstimate(x_local, P_local)


def diffuse(locals_, C_row) -> NodeEstimate:
    """Convex combination of neighbor estimates and covariances."""
    C_row = np.asarray(C_row, dtype=float)
    if np.any(C_row < 0) or abs(C_row.sum() - 1.0) > 1e-12:
        raise ValueError("diffusion weights must be non-negative and sum to 1")
    x = sum(c * e.x_hat for c, e in zip(C_row, locals_))
    P = sum(c * e.P_hat for c, e in zip(C_row, locals_))
    return NodeEstimate(np.asarray(x, dtype=float), _symmetrize(np.asarray(P, dtype=float)))


# --------------------------------------------------------------------------
# whole-network step


@dataclass(frozen=True)
class NetworkModel:
    """Everything a step needs that does not change over time."""

    F: np.ndarray
    Q: np.ndarray
    positions: np.ndarray  # (N, 3)
    R_v: np.ndarray  # (N,)
    R_n: np.ndarray  # (N,)
    fading: FadingParams  # per-node arrays
    graph: Graph
    kappa: float = 0.0

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def eps_m2(self) -> np.ndarray:
        return np.broadcast_to(self.fading.eps_second_moment(), (self.n_nodes,))

    @property
    def sigma_theta(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fading.sigma_theta, dtype=float), (self.n_nodes,))


@dataclass
class NetworkState:
    x: np.ndarray  # (N, n)
    P: np.ndarray  # (N, n, n)

    @classmethod
    def uniform(cls, x0, P0, n_nodes: int) -> "NetworkState":
        x0 = np.asarray(x0, dtype=float)
        P0 = np.asarray(P0, dtype=float)
        return cls(np.tile(x0, (n_nodes, 1)), np.tile(P0, (n_nodes, 1, 1)))

    def copy(self) -> "NetworkState":
        return NetworkState(self.x.copy(), self.P.copy())


@dataclass
class StepInputs:
    """What the world hands the filter at one step.

    ``gamma[i, j]`` / ``gamma_plus[i, j]`` = 1 when j's packet reached i in
    the information-pair / diffusion round.
    """

    z: np.ndarray  # (N,)
    theta: np.ndarray  # (N,)
    theta_hat: np.ndarray  # (N,)
    gamma: np.ndarray  # (N, N)
    gamma_plus: np.ndarray  # (N, N)


@dataclass
class StepTelemetry:
    C: np.ndarray
    eig_min: np.ndarray
    eig_max: np.ndarray
    delivered_info: int
    delivered_diffusion: int
    attempted: int


def measurement_noise_var(variant: Variant, model: NetworkModel, h_pred, theta):
    """Per-node scalar noise variance the filter assumes for its measurement."""
    two_s2 = 2.0 * model.sigma_theta**2
    if variant is Variant.FC:
        return two_s2 * model.eps_m2 * h_pred**2 + two_s2 * model.R_v + model.R_n
    if variant is Variant.EFC:
        return two_s2 * model.R_v + model.R_n
    return model.R_v + model.R_n


def filter_step(state: NetworkState, inputs: StepInputs, variant: Variant, model: NetworkModel):
    """Advance every node by one step of the distributed filter."""
    variant = Variant(variant)
    n_nodes = model.n_nodes

    # Step 1: sampling and prediction
    x_pred, P_pred, pts = predict(state.x, state.P, model.F, model.Q, model.kappa)
    if variant is Variant.FC:
        theta_used = inputs.theta_hat
    elif variant is Variant.EFC:
        theta_used = inputs.theta
    else:
        theta_used = np.ones(n_nodes)
    z_hat, xi = predict_measurement(pts, model.positions, theta_used)
    h_pred = dynamics.range_measurement(x_pred, model.positions)
    R_nu = measurement_noise_var(variant, model, h_pred, inputs.theta)[:, None, None]

    # Step 2: local estimation from the information pairs that arrived
    P_zz, P_xz = innovation_covariances(pts, xi, x_pred, z_hat, R_nu)
    P_pred_inv = _spd_inverse(P_pred, SingularCovariance, "predicted covariance")
    pair = information_pair(P_pred, P_xz, P_zz, inputs.z[:, None], z_hat, P_pred_inv)
    adj = model.graph.adjacency
    G = np.where(adj, inputs.gamma, 0).astype(float)
    np.fill_diagonal(G, 1.0)
    info_mat = np.einsum("ij,jab->iab", G, pair.omega_mat)
    info_vec = G @ pair.omega_vec
    x_local, P_local = _fuse(x_pred, P_pred_inv, info_mat, info_vec)

    # Step 3: diffusion of local estimates
    C = metropolis_weights(model.graph, inputs.gamma_plus)
    x_glob = C @ x_local
    P_glob = _symmetrize(np.einsum("ij,jab->iab", C, P_local))

    eig = np.linalg.eigvalsh(P_glob)
    n_edges = int(adj.sum())
    telemetry = StepTelemetry(
        C=C,
        eig_min=eig[:, 0],
        eig_max=eig[:, -1],
        delivered_info=int((adj & (inputs.gamma != 0)).sum()),
        delivered_diffusion=int((adj & (inputs.gamma_plus != 0)).sum()),
        attempted=2 * n_edges,
    )
    return NetworkState(x_glob, P_glob), telemetry


def draw_step_inputs(truth_x, model: NetworkModel, q, q_plus, rng: RngStream) -> StepInputs:
    """Sample fading, fluctuated measurements and link indicators for one step.

    ``q`` and ``q_plus`` are success probabilities, scalar or ``(N, N)``.
    """
    n = model.n_nodes
    fs = sample_fading(model.fading, rng.child("fading"), size=n)
    v = rng.child("v").generator().standard_normal(n)
    y = dynamics.range_measurement(truth_x, model.positions) + np.sqrt(model.R_v) * v
    z = apply_fading(y, fs, model.R_n, rng.child("n"))
    gamma = (rng.child("gamma").generator().random((n, n)) < q).astype(np.int8)
    gamma_plus = (rng.child("gamma_plus").generator().random((n, n)) < q_plus).astype(np.int8)
    np.fill_diagonal(gamma, 1)
    np.fill_diagonal(gamma_plus, 1)
    return StepInputs(z=z, theta=fs.theta, theta_hat=fs.theta_hat, gamma=gamma, gamma_plus=gamma_plus)


def step_network(state: NetworkState, truth_x, variant: Variant, model: NetworkModel, rng: RngStream, q=1.0, q_plus=None):
    """Draw one step of channel realizations and run the filter on it."""
    inputs = draw_step_inputs(truth_x, model, q, q if q_plus is None else q_plus, rng)
    new_state, telemetry = filter_step(state, inputs, variant, model)
    return new_state, telemetry, inputs
