import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fadetrack import network
from fadetrack.network import Graph


def test_range_graph_examples():
    g = network.build_graph_from_positions([[0, 0, 0], [500, 0, 0]], 600)
    assert g.edges == {(0, 1), (1, 0)}
    g = network.build_graph_from_positions([[0, 0, 0], [700, 0, 0]], 600)
    assert g.edges == frozenset()
    g = network.build_graph_from_positions([[0, 0, 0], [500, 0, 0], [1000, 0, 0]], 600)
    assert g.edges == {(0, 1), (1, 0), (1, 2), (2, 1)}
    assert network.is_connected(g)
    with pytest.raises(ValueError):
        network.build_graph_from_positions([[0, 0, 0]], 0)


def test_neighborhoods_include_self():
    g = Graph(3, frozenset({(0, 1), (2, 1)}))
    assert network.in_neighbors(g, 0) == {0, 1}
    assert network.out_neighbors(g, 1) == {0, 1, 2}
    assert list(g.in_degree) == [2, 1, 2]
    assert not network.is_connected(g)


def test_graph_validation_and_roundtrip():
    with pytest.raises(ValueError):
        Graph(2, frozenset({(0, 0)}))
    with pytest.raises(ValueError):
        Graph(2, frozenset({(0, 2)}))
    g = Graph(3, frozenset({(0, 1), (1, 0), (2, 0)}))
    assert Graph.from_adjacency_list(3, g.to_adjacency_list()) == g


def test_metropolis_hand_example():
    # path 0 - 1 - 2: degrees (with self) 2, 3, 2
    g = network.build_graph_from_positions([[0, 0, 0], [500, 0, 0], [1000, 0, 0]], 600)
    C = network.metropolis_weights(g)
    expected = np.array([[2 / 3, 1 / 3, 0], [1 / 3, 1 / 3, 1 / 3], [0, 1 / 3, 2 / 3]])
    np.testing.assert_allclose(C, expected, rtol=1e-15)


def test_metropolis_lost_links_fold_into_diagonal():
    g = network.build_graph_from_positions([[0, 0, 0], [500, 0, 0], [1000, 0, 0]], 600)
    gp = np.ones((3, 3), dtype=int)
    gp[1, 0] = 0  # node 1 missed node 0's packet
    C = network.metropolis_weights(g, gp)
    assert C[1, 0] == 0
    assert C[1, 1] == pytest.approx(2 / 3)
    assert C[0, 1] == pytest.approx(1 / 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 25), st.integers(0, 2**31), st.floats(0, 1))
def test_metropolis_row_stochastic_nonnegative(n, seed, q):
    rng = np.random.default_rng(seed)
    g = network.build_graph_from_positions(rng.uniform(0, 1000, (n, 3)), 600)
    gp = rng.random((n, n)) < q
    C = network.metropolis_weights(g, gp)
    assert np.all(C >= 0)
    np.testing.assert_allclose(C.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.diag(C) > 0)
    assert not np.any(C[~(g.adjacency | np.eye(n, dtype=bool))])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2**31))
def test_metropolis_symmetric_without_losses(n, seed):
    rng = np.random.default_rng(seed)
    g = network.build_graph_from_positions(rng.uniform(0, 1000, (n, 3)), 600)
    C = network.metropolis_weights(g)
    np.testing.assert_allclose(C, C.T, atol=1e-15)


def test_primitivity_check():
    g = network.build_graph_from_positions([[0, 0, 0], [500, 0, 0], [1000, 0, 0]], 600)
    assert network.check_primitivity(network.metropolis_weights(g))
    assert not network.check_primitivity(np.eye(3))
