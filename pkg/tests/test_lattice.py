import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsvie.errors import SpecError
from fbsvie.lattice import (
    MAX_EXACT_STEPS,
    RegressionLattice,
    ScenarioTree,
    TimeGrid,
    conditional_expectation,
    integrate_drift,
    martingale_representation,
    stochastic_integral,
)


def _ancestor_means(tree, v, k):
    """Brute-force E[v | F_k]: average over leaves sharing the first k moves."""
    out = np.empty_like(v)
    for leaf in range(tree.n_paths):
        prefix = tuple(tree.dW[:k, leaf] > 0)
        same = [m for m in range(tree.n_paths) if tuple(tree.dW[:k, m] > 0) == prefix]
        out[leaf] = v[same].mean()
    return out


@pytest.mark.parametrize("T,N", [(0.0, 4), (-1.0, 4), (np.inf, 4), (1.0, 0), (1.0, 2.5)])
def test_grid_rejects_bad_input(T, N):
    with pytest.raises(SpecError):
        TimeGrid(T, N)


def test_grid_index_of_nodes():
    g = TimeGrid(2.0, 8)
    assert g.h == 0.25
    assert g.index(0.75) == 3
    with pytest.raises(SpecError):
        g.index(0.3)
    with pytest.raises(SpecError):
        g.index(2.5)


def test_tree_size_limit():
    with pytest.raises(SpecError):
        ScenarioTree.build(1.0, MAX_EXACT_STEPS + 1)


def test_increments_and_moments(tree_factory):
    tree = tree_factory(6)
    assert np.allclose(np.abs(tree.dW), np.sqrt(tree.h))
    assert tree.W.shape == (7, 64)
    # exact moments of the symmetric random walk
    assert np.allclose(tree.expectation(tree.W), 0.0, atol=1e-15)
    assert np.allclose(tree.expectation(tree.W ** 2), tree.t)
    assert np.allclose(tree.expectation(tree.W ** 4), 3 * tree.t ** 2 - 2 * tree.t * tree.h)


def test_leaf_ordering_up_first(tree_factory):
    tree = tree_factory(3)
    assert tree.dW[0, 0] > 0 and tree.dW[0, -1] < 0
    assert tree.node_of(5, 2) == 2
    assert tree.node_of(5, 3) == 5
    assert tree.node_of(5, 0) == 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=16, max_size=16), st.integers(0, 4))
def test_projection_matches_brute_force(values, k):
    tree = ScenarioTree.build(1.0, 4)
    v = np.array(values)
    assert np.allclose(tree.project(v, k), _ancestor_means(tree, v, k), atol=1e-12)
    assert tree.is_adapted(tree.project(v, k), k, tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=32, max_size=32), st.integers(0, 4))
def test_one_step_representation_is_exact(values, k):
    tree = ScenarioTree.build(1.0, 5)
    v = np.array(values)
    m, z = tree.represent(v, k)
    assert np.allclose(m + z * tree.dW[k], tree.project(v, k + 1), atol=1e-10)
    assert tree.is_adapted(z, k, tol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=32, max_size=32))
def test_tower_property(values):
    tree = ScenarioTree.build(1.0, 5)
    v = np.array(values)
    for a in range(6):
        for b in range(a, 6):
            assert np.allclose(tree.project(tree.project(v, b), a), tree.project(v, a), atol=1e-12)


def test_node_helpers_round_trip(tree_factory):
    tree = tree_factory(4)
    v = np.sin(np.arange(16.0))
    nodes = conditional_expectation(tree, v, 2)
    assert nodes.shape == (4,)
    assert np.allclose(tree.expand(nodes, 2), tree.project(v, 2))
    m, z = martingale_representation(tree, tree.node_values(tree.project(v, 3), 3), 2)
    assert m.shape == z.shape == (4,)
    with pytest.raises(SpecError):
        tree.expand(np.ones(3), 2)
    with pytest.raises(SpecError):
        conditional_expectation(tree, np.ones(5), 1)
    with pytest.raises(SpecError):
        tree.project(v, 7)


def test_riemann_and_ito_sums(tree_factory):
    tree = tree_factory(4)
    f = np.arange(5.0)
    assert integrate_drift(tree, f, 1, 3) == pytest.approx((1 + 2) * tree.h)
    assert np.allclose(stochastic_integral(tree, np.ones((5, 16)), 0, 4), tree.W[4])
    assert np.all(integrate_drift(tree, f, 2, 2) == 0.0)
    with pytest.raises(SpecError):
        integrate_drift(tree, f, 3, 1)
    with pytest.raises(SpecError):
        stochastic_integral(tree, f, 3, 1)


def test_dump_csv(tmp_path, tree_factory):
    tree = tree_factory(3)
    path = tmp_path / "tree.csv"
    tree.dump_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["level", "node_id", "W_value"]
    assert len(rows) == 1 + 1 + 2 + 4 + 8
    level3 = [float(r[2]) for r in rows[1:] if r[0] == "3"]
    s = np.sqrt(tree.h)
    assert level3[0] == pytest.approx(3 * s) and level3[-1] == pytest.approx(-3 * s)


def test_regression_lattice_reproduces_polynomials():
    lat = RegressionLattice(TimeGrid(1.0, 4), n_paths=4000, seed=3)
    k = 2
    v = lat.W[k] ** 3 - 2 * lat.W[k]
    assert np.allclose(lat.project(v, k), v, atol=1e-10)
    # E[W_T | F_k] = W_k up to sampling error
    assert np.sqrt(np.mean((lat.project(lat.W[-1], k) - lat.W[k]) ** 2)) < 0.05
    m, z = lat.represent(lat.W[k + 1], k)
    assert np.mean(np.abs(z - 1.0)) < 0.1
    with pytest.raises(SpecError):
        RegressionLattice(TimeGrid(1.0, 4), n_paths=3)


def test_regression_lattice_is_seeded():
    a = RegressionLattice(TimeGrid(1.0, 3), n_paths=100, seed=7)
    b = RegressionLattice(TimeGrid(1.0, 3), n_paths=100, seed=7)
    assert np.array_equal(a.W, b.W)
