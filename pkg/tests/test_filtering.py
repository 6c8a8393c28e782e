import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fadetrack import channel, dynamics, filtering, network
from fadetrack.filtering import NetworkModel, NetworkState, StepInputs, Variant
from fadetrack.numerics import RngStream
from fadetrack.verify import if_gain_instance, random_spd


def small_model(n=5, seed=0, comm=700.0):
    rng = np.random.default_rng(seed)
    while True:
        pos = rng.uniform(0, 1000, (n, 3)) * [1, 1, -1.5]
        g = network.build_graph_from_positions(pos, comm)
        if network.is_connected(g):
            break
    ids = np.arange(1, n + 1)
    mp = dynamics.MotionParams()
    fp = channel.FadingParams(np.full(n, 0.5), np.sqrt(ids), np.full(n, 0.1))
    return NetworkModel(dynamics.transition_matrix(mp), dynamics.process_noise_cov(mp), pos, 10 * np.sqrt(ids), np.sqrt(ids), fp, g)


def test_sigma_weights():
    w = filtering.sigma_weights(6, 0.0)
    assert w.sum() == pytest.approx(1.0)
    assert w[0] == 0.0 and w[1] == pytest.approx(1 / 12)
    with pytest.raises(filtering.InvalidScaling):
        filtering.sigma_weights(6, -6.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.0, 1.0, 2.5]))
def test_sigma_points_reconstruct_moments(seed, kappa):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 10, 6)
    P = random_spd(rng, 6, cond=1e4, scale=50.0)
    sp = filtering.sample_sigma_points(x, P, kappa)
    assert sp.points.shape == (13, 6)
    mean = sp.weights @ sp.points
    dev = sp.points - mean
    cov = (sp.weights[:, None] * dev).T @ dev
    np.testing.assert_allclose(mean, x, atol=1e-10)
    np.testing.assert_allclose(cov, P, rtol=1e-10, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_predict_is_exact_for_linear_maps(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 10, 6)
    P = random_spd(rng, 6, scale=10.0)
    F = rng.normal(size=(6, 6))
    Q = random_spd(rng, 6)
    x_pred, P_pred, _ = filtering.predict(x, P, F, Q)
    np.testing.assert_allclose(x_pred, F @ x, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(P_pred, F @ P @ F.T + Q, rtol=1e-9, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_information_form_matches_gain_form(seed):
    fused, gain = if_gain_instance(np.random.default_rng(seed))
    np.testing.assert_allclose(fused.x_hat, gain.x_hat, rtol=1e-10, atol=1e-9)
    np.testing.assert_allclose(fused.P_hat, gain.P_hat, rtol=1e-9, atol=1e-9)


def test_lost_pair_contributes_nothing():
    rng = np.random.default_rng(3)
    x = rng.normal(size=6)
    P = random_spd(rng, 6)
    pair = filtering.InformationPair(random_spd(rng, 6), rng.normal(size=6))
    out = filtering.local_fuse(x, P, [(pair, 0)])
    np.testing.assert_allclose(out.x_hat, x)
    np.testing.assert_allclose(out.P_hat, P, rtol=1e-10)


def test_measurement_prediction_scaling():
    x = np.zeros(6)
    sp = filtering.sample_sigma_points(x, np.eye(6))
    z_hat, xi = filtering.predict_measurement(sp, np.array([3.0, 4.0, 0.0]), theta_hat=2.0)
    assert xi.shape == (13, 1)
    assert xi[0, 0] == pytest.approx(10.0)


def test_singular_innovation_is_reported():
    x = np.zeros(6)
    P = np.eye(6)
    with pytest.raises(filtering.SingularInnovation):
        filtering.gain_form_update(x, P, np.zeros((6, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros(1))


def test_diffuse_convex_combination():
    a = filtering.NodeEstimate(np.zeros(6), np.eye(6))
    b = filtering.NodeEstimate(np.ones(6), 3 * np.eye(6))
    out = filtering.diffuse([a, b], [0.25, 0.75])
    np.testing.assert_allclose(out.x_hat, 0.75)
    np.testing.assert_allclose(out.P_hat, 2.5 * np.eye(6))
    with pytest.raises(ValueError):
        filtering.diffuse([a, b], [0.5, 0.6])


def test_noise_variance_per_variant():
    m = small_model()
    h = np.full(m.n_nodes, 1000.0)
    theta = np.full(m.n_nodes, 0.7)
    two_s2 = 0.5
    fc = filtering.measurement_noise_var(Variant.FC, m, h, theta)
    efc = filtering.measurement_noise_var(Variant.EFC, m, h, theta)
    nfc = filtering.measurement_noise_var(Variant.NFC, m, h, theta)
    np.testing.assert_allclose(efc, two_s2 * m.R_v + m.R_n)
    np.testing.assert_allclose(nfc, m.R_v + m.R_n)
    np.testing.assert_allclose(fc - efc, two_s2 * m.eps_m2 * 1e6)


def loop_reference_step(state, inputs, variant, model):
    """Node-by-node step built from the single-node operations."""
    n = model.n_nodes
    adj = model.graph.adjacency
    locals_, pairs = [], []
    preds = []
    for i in range(n):
        x_pred, P_pred, pts = filtering.predict(state.x[i], state.P[i], model.F, model.Q, model.kappa)
        th = {Variant.FC: inputs.theta_hat[i], Variant.EFC: inputs.theta[i], Variant.NFC: 1.0}[variant]
        z_hat, xi = filtering.predict_measurement(pts, model.positions[i], th)
        h = dynamics.range_measurement(x_pred, model.positions[i])
        fp = channel.FadingParams(model.fading.sigma_theta[i], model.fading.sigma_eps[i], model.fading.delta_eps[i])
        if variant is Variant.FC:
            R = channel.fading_noise_cov(fp, model.R_v[i], model.R_n[i], [h])
        elif variant is Variant.EFC:
            R = channel.fading_noise_cov(fp, model.R_v[i], model.R_n[i], [0.0])
        else:
            R = np.array([[model.R_v[i] + model.R_n[i]]])
        P_zz, P_xz = filtering.innovation_covariances(pts, xi, x_pred, z_hat, R)
        pairs.append(filtering.information_pair(P_pred, P_xz, P_zz, inputs.z[i : i + 1], z_hat))
        preds.append((x_pred, P_pred))
    for i in range(n):
        incoming = [(pairs[j], 1 if j == i else int(adj[i, j] and inputs.gamma[i, j])) for j in range(n)]
        locals_.append(filtering.local_fuse(*preds[i], incoming))
    C = network.metropolis_weights(model.graph, inputs.gamma_plus)
    out = [filtering.diffuse(locals_, C[i]) for i in range(n)]
    return np.array([o.x_hat for o in out]), np.array([o.P_hat for o in out])


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("q", [1.0, 0.5])
def test_network_step_matches_node_loop(variant, q):
    model = small_model()
    x0 = np.array([0.0, 10.0, 0.0, 3.0, -1500.0, 2.0])
    state = NetworkState.uniform(x0 + 20, 100 * np.eye(6), model.n_nodes)
    truth = x0
    for k in range(5):
        truth = model.F @ truth
        inputs = filtering.draw_step_inputs(truth, model, q, q, RngStream(9, ("step", k)))
        x_ref, P_ref = loop_reference_step(state, inputs, variant, model)
        state, tel = filtering.filter_step(state, inputs, variant, model)
        np.testing.assert_allclose(state.x, x_ref, rtol=1e-9, atol=1e-8)
        np.testing.assert_allclose(state.P, P_ref, rtol=1e-8, atol=1e-9)
        assert np.all(tel.eig_min > 0)
        assert tel.attempted == 2 * len(model.graph.edges)


def test_step_inputs_self_links_and_shapes():
    model = small_model()
    inputs = filtering.draw_step_inputs(np.zeros(6), model, 0.0, 0.0, RngStream(1))
    np.testing.assert_array_equal(np.diag(inputs.gamma), 1)
    assert inputs.gamma.sum() == model.n_nodes
    assert inputs.z.shape == (model.n_nodes,)


def test_isolated_nodes_still_update_locally():
    model = small_model()
    state = NetworkState.uniform(np.array([10.0, 10, 0, 3, -1490, 2]), 100 * np.eye(6), model.n_nodes)
    inputs = filtering.draw_step_inputs(np.array([0.0, 10, 0, 3, -1500, 2]), model, 0.0, 0.0, RngStream(2))
    new, tel = filtering.filter_step(state, inputs, Variant.FC, model)
    np.testing.assert_allclose(tel.C, np.eye(model.n_nodes))
    assert tel.delivered_info == 0 and tel.delivered_diffusion == 0
    assert np.all(np.isfinite(new.x))


def test_step_network_runs():
    model = small_model()
    state = NetworkState.uniform(np.zeros(6), np.eye(6) * 100, model.n_nodes)
    new, tel, inputs = filtering.step_network(state, np.zeros(6), Variant.NFC, model, RngStream(3), q=0.7)
    assert isinstance(inputs, StepInputs)
    assert new.x.shape == (model.n_nodes, 6)
