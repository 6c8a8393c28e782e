import numpy as np
import pytest

from fadetrack import filtering
from fadetrack.channel import success_prob_from_power
from fadetrack.network import is_connected
from fadetrack.numerics import RngStream
from fadetrack.sim import engine
from fadetrack.sim.config import ConfigError, load_scenario

SMALL = ["runs=4", "duration_steps=15", "steady_window_steps=5", "network.n_nodes=8", "network.comm_range_m=800"]


def small(*extra):
    return load_scenario(overrides=SMALL + list(extra))


def test_exact_initialization_gives_zero_initial_error():
    cfg = small("runs=1", "motion.eta_sq=0", "links.q=1.0", "initial.estimate=[0,10,0,3,-1500,2]")
    mc = engine.run_monte_carlo(cfg)
    for rep in mc.reports.values():
        assert rep.rmse_p[0] == 0.0 and rep.rmse_v[0] == 0.0
        assert len(rep.rmse_p) == cfg.duration_steps + 1


def test_run_result_shapes_and_energy():
    cfg = small()
    res = engine.simulate_run(cfg, 0)
    K, N = cfg.duration_steps, cfg.network.n_nodes
    for r in res:
        assert r.estimates.shape == (K + 1, N, 6)
        assert r.energy_j.shape == (K,) and np.all(r.energy_j >= 0)
        assert r.pf_vectors.shape == (K, N)
        assert np.all(r.delivered_info <= r.attempted // 2)


def test_variants_share_random_numbers():
    cfg = small()
    fc, efc, nfc = engine.simulate_run(cfg, 2)
    np.testing.assert_array_equal(fc.truth, efc.truth)
    np.testing.assert_array_equal(fc.truth, nfc.truth)
    # identical link draws imply identical delivery counts
    np.testing.assert_array_equal(fc.delivered_info, nfc.delivered_info)
    np.testing.assert_array_equal(fc.delivered_diffusion, efc.delivered_diffusion)


def test_runs_are_independent_of_each_other():
    cfg = small()
    a = engine.simulate_run(cfg, 3)[0]
    b = engine.run_monte_carlo(cfg).results["Fc"][3]
    np.testing.assert_array_equal(a.estimates, b.estimates)
    assert not np.array_equal(engine.simulate_run(cfg, 1)[0].truth, a.truth)


def test_worker_count_does_not_change_results():
    cfg = small("runs=5")
    one = engine.run_monte_carlo(cfg, workers=1)
    two = engine.run_monte_carlo(cfg, workers=2)
    for v in cfg.filter.variants:
        np.testing.assert_array_equal(one.reports[v].rmse_p, two.reports[v].rmse_p)
        np.testing.assert_array_equal(one.reports[v].per_run_steady_v, two.reports[v].per_run_steady_v)


def test_failure_policy(monkeypatch):
    real = engine.filter_step

    def flaky(state, inputs, variant, model):
        # abort the Fc filter whenever the seeded draw is unlucky
        if variant is filtering.Variant.FC and inputs.z[0] < 0:
            raise filtering.SingularCovariance("injected", node=0)
        return real(state, inputs, variant, model)

    monkeypatch.setattr(engine, "filter_step", flaky)
    cfg = small("runs=6", "sensors.r_n_m2=1e7")
    with pytest.raises(engine.ExperimentFailed) as exc:
        engine.run_monte_carlo(cfg)
    mc = exc.value.result
    failures = mc.failures["Fc"]
    assert failures and all(f.node == 0 and f.step >= 1 for f in failures)
    assert mc.reports["Fc"].runs_used + len(failures) == cfg.runs
    assert mc.reports["Fc"].runs_failed == len(failures)
    assert mc.reports["eFc"].runs_used == cfg.runs
    relaxed = cfg.with_overrides(["failure_threshold=1.0"])
    assert engine.run_monte_carlo(relaxed).reports["Fc"].runs_used == cfg.runs - len(failures)


def test_per_run_placement():
    cfg = small("network.placement.per_run=true")
    a = engine.build_world(cfg, 0).model.positions
    b = engine.build_world(cfg, 1).model.positions
    assert not np.array_equal(a, b)
    shared = small()
    np.testing.assert_array_equal(engine.build_world(shared, 0).model.positions, engine.build_world(shared, 1).model.positions)


def test_connected_placement_or_config_error():
    cfg = small()
    assert is_connected(engine.build_world(cfg).model.graph)
    with pytest.raises(ConfigError):
        engine.build_world(small("network.comm_range_m=1", "network.placement.max_attempts=3"))


def test_power_mode_links():
    cfg = small("links.mode=u", "links.power_mw=400")
    world = engine.build_world(cfg)
    q, u = engine.link_levels(cfg, world.channel, 8, None)
    assert u == 0.4 and q == pytest.approx(1.0)
    cfg = small("links.mode=u", "links.power_range_mw=[118,168]")
    q, u = engine.link_levels(cfg, world.channel, 8, RngStream(1))
    assert u.shape == (8, 8) and np.all((u >= 0.118) & (u <= 0.168))
    np.testing.assert_array_equal(q, success_prob_from_power(u, world.channel))


def test_q_range_links():
    cfg = small("links.q_range=[0.45,0.55]")
    world = engine.build_world(cfg)
    q, u = engine.link_levels(cfg, world.channel, 8, RngStream(2))
    assert np.all((q >= 0.45) & (q <= 0.55))
    assert u == pytest.approx(0.14)


def test_energy_uses_attempted_transmissions():
    cfg = small("links.q=0.0")
    r = engine.simulate_run(cfg, 0)[0]
    edges = len(engine.build_world(cfg).model.graph.edges)
    np.testing.assert_allclose(r.energy_j, 2 * edges * 0.14 * 1000 / 6000)
    assert np.all(r.delivered_info == 0)
