import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from fbsvie.control import check_maximum_principle, evaluate_cost, solve_adjoint, solve_state
from fbsvie.errors import ConvergenceError, SpecError
from fbsvie.experiments import lq_instance
from fbsvie.lattice import ScenarioTree
from fbsvie.lq import (
    LqSpec,
    brute_force_lq,
    control_from_nodes,
    coupled_residuals,
    feedback_spectral_radius,
    solve_lq,
    stationarity_residual,
)
from fbsvie.processes import ControlSet


def _random_adapted(tree, rng):
    v = np.zeros(tree.W.shape)
    for k in range(tree.N):
        v[k] = tree.project(rng.normal(size=tree.n_paths), k)
    return v


@pytest.fixture(scope="module")
def solved8():
    tree = ScenarioTree.build(1.0, 8)
    spec = lq_instance(tree)
    return spec, solve_lq(spec)


def test_stationarity_and_coupled_system(solved8):
    spec, res = solved8
    assert stationarity_residual(spec, res) <= 1e-9
    r1, r2 = coupled_residuals(spec, res)
    assert r1 <= 1e-8 and r2 <= 1e-8
    assert np.all(res.u[0] == 0.0)


def test_random_directions_do_not_improve(solved8):
    spec, res = solved8
    prob = spec.problem()
    rng = np.random.default_rng(0)
    J = evaluate_cost(prob, res.u)
    assert J == pytest.approx(res.J)
    for _ in range(20):
        v = _random_adapted(spec.tree, rng)
        for eps in (1e-2, 1e-1):
            assert J <= evaluate_cost(prob, res.u + eps * v) + 1e-14


def test_exhaustive_grid_at_two_steps():
    tree = ScenarioTree.build(1.0, 2)
    spec = lq_instance(tree)
    res = solve_lq(spec)
    # grid centred on zero and grid centred on the computed optimum
    _, J_abs = brute_force_lq(spec, np.linspace(-1.0, 1.0, 5))
    assert res.J <= J_abs + 1e-14
    nodes = np.concatenate([tree.node_values(res.u[k], k) for k in range(tree.N)])
    prob = spec.problem()
    for offsets in np.array(np.meshgrid(*[np.linspace(-0.2, 0.2, 5)] * 3)).reshape(3, -1).T:
        assert res.J <= evaluate_cost(prob, control_from_nodes(tree, nodes + offsets)) + 1e-14


def test_matches_derivative_free_minimisation():
    tree = ScenarioTree.build(1.0, 3)
    spec = lq_instance(tree)
    prob = spec.problem()
    res = solve_lq(spec)
    out = minimize(lambda x: evaluate_cost(prob, control_from_nodes(tree, x)), np.zeros(7), method="BFGS",
                   options={"gtol": 1e-10})
    assert res.J == pytest.approx(out.fun, abs=1e-9)
    assert res.J <= out.fun + 1e-12


def test_plain_half_damping_diverges_and_auto_damping_does_not():
    tree = ScenarioTree.build(1.0, 4)
    spec = lq_instance(tree)
    assert feedback_spectral_radius(spec) > 3.0
    with pytest.raises(ConvergenceError):
        solve_lq(spec, damping=0.5, max_sweeps=400)
    assert solve_lq(spec).sweeps < 400


def test_bounded_controls():
    tree = ScenarioTree.build(1.0, 4)
    U = ControlSet(-0.2, 0.2)
    spec = lq_instance(tree, U=U)
    res = solve_lq(spec)
    assert np.any(np.isclose(np.abs(res.u), 0.2))
    assert U.contains(res.u)
    prob = spec.problem()
    st_ = solve_state(prob, res.u)
    worst, _ = check_maximum_principle(prob, solve_adjoint(prob, st_), st_)
    assert worst <= 1e-9
    assert stationarity_residual(spec, res) <= 1e-9
    _, J_bf = brute_force_lq(spec, [0.0], max_evals=0)
    assert res.J == pytest.approx(J_bf, abs=1e-9)


def test_control_without_effect_is_zero():
    tree = ScenarioTree.build(1.0, 4)
    spec = LqSpec(tree, psi=np.broadcast_to(tree.W[-1], tree.W.shape).copy(), l1=lambda t, s: 0.5 + 0 * t,
                  Qw=1.0, Rw=1.0, G=1.0)
    res = solve_lq(spec)
    assert np.all(res.u == 0.0)
    assert res.J == pytest.approx(evaluate_cost(spec.problem(), 0.0))


@pytest.mark.parametrize("kw", [{"Rw": 0.0}, {"Rw": -1.0}, {"Qw": -0.1}, {"G": -1.0}])
def test_spec_validation(kw):
    tree = ScenarioTree.build(1.0, 2)
    with pytest.raises(SpecError):
        LqSpec(tree, psi=0.0, **kw)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_cost_is_convex(seed):
    tree = ScenarioTree.build(1.0, 3)
    prob = lq_instance(tree).problem()
    rng = np.random.default_rng(seed)
    v1, v2 = _random_adapted(tree, rng), _random_adapted(tree, rng)
    mid = evaluate_cost(prob, 0.5 * (v1 + v2))
    assert mid <= 0.5 * (evaluate_cost(prob, v1) + evaluate_cost(prob, v2)) + 1e-10
