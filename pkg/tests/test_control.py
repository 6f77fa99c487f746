import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsvie.control import (
    ControlProblem,
    adjoint_derivative,
    check_duality,
    check_maximum_principle,
    convergence_diagnostics,
    evaluate_cost,
    gateaux_derivative,
    hamiltonian,
    hamiltonian_coefficient,
    solve_adjoint,
    solve_state,
    solve_variational,
    terminal_density,
)
from fbsvie.errors import InfeasibleControlError, SpecError
from fbsvie.experiments import nonlinear_control_instance
from fbsvie.lattice import ScenarioTree
from fbsvie.processes import CoefficientSpec, ControlSet, GeneratorSpec
from helpers import random_lq_problem

TREE6 = ScenarioTree.build(1.0, 6)


def _fd_derivative(prob, u, v, eps=1e-3):
    return (evaluate_cost(prob, u + eps * v) - evaluate_cost(prob, u - eps * v)) / (2 * eps)


@pytest.mark.parametrize("seed", range(5))
def test_adjoint_derivative_matches_variational(seed):
    rng = np.random.default_rng(seed)
    prob = random_lq_problem(TREE6, rng)
    u = np.sin(TREE6.W)
    v = np.cos(2 * TREE6.W + TREE6.t[:, None])
    st_ = solve_state(prob, u)
    lhs = gateaux_derivative(prob, st_, v)
    rhs = adjoint_derivative(prob, st_, solve_adjoint(prob, st_), v)
    assert abs(lhs - rhs) <= 1e-6 * abs(lhs)
    # central difference is exact for a quadratic cost
    assert _fd_derivative(prob, u, v) == pytest.approx(lhs, rel=1e-6)


def test_identity_holds_for_nonlinear_instance():
    prob = nonlinear_control_instance(TREE6)
    u = 0.3 * np.cos(TREE6.W)
    v = np.sin(TREE6.W + TREE6.t[:, None])
    st_ = solve_state(prob, u)
    lhs = gateaux_derivative(prob, st_, v)
    rhs = adjoint_derivative(prob, st_, solve_adjoint(prob, st_), v)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
    assert _fd_derivative(prob, u, v, eps=1e-5) == pytest.approx(lhs, rel=1e-6)


def test_picard_backend_matches_direct_sweep():
    prob = random_lq_problem(TREE6, np.random.default_rng(9))
    u = np.sin(TREE6.W)
    a = solve_adjoint(prob, solve_state(prob, u))
    prob.solver = "picard"
    st_ = solve_state(prob, u)
    b = solve_adjoint(prob, st_)
    assert st_.report.converged
    assert np.max(np.abs(a.Q - b.Q)) < 1e-10 and np.max(np.abs(a.R - b.R)) < 1e-10


def test_cost_by_hand():
    tree = ScenarioTree.build(1.0, 2)
    coeffs = CoefficientSpec(l=lambda s, x, y, v: v ** 2, h=lambda x: x, gamma=lambda y: 2 * y)
    gen = GeneratorSpec(g=lambda t, s, x, y, z, zeta, v: 0 * y)
    prob = ControlProblem(tree=tree, phi=3.0, coeffs=coeffs, psi=5.0, generator=gen)
    # l sums v^2 h over t_0, t_1; X = 3; Y_0 = 5
    assert evaluate_cost(prob, 1.0) == pytest.approx(2 * 0.5 + 3 + 10)


def test_problem_validation():
    gen = GeneratorSpec(g=lambda t, s, x, y, z, zeta, v: z, g_z=lambda *a: 1.0)
    with pytest.raises(SpecError):
        ControlProblem(tree=TREE6, phi=0.0, coeffs=CoefficientSpec(), psi=0.0, generator=gen)
    with pytest.raises(SpecError):
        ControlProblem(tree=TREE6, phi=0.0, coeffs=CoefficientSpec(), psi=0.0,
                       generator=GeneratorSpec(g=lambda *a: 0.0), solver="newton")
    prob = ControlProblem(tree=TREE6, phi=0.0, coeffs=CoefficientSpec(), psi=0.0,
                          generator=GeneratorSpec(g=lambda *a: 0.0), U=ControlSet(0.0, 1.0))
    with pytest.raises(InfeasibleControlError):
        solve_state(prob, -1.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(2, 6))
def test_strict_rule_duality_is_exact(a1, a2, N):
    tree = ScenarioTree.build(1.0, N)
    psi = np.cos(tree.W[-1])[None, :] + tree.t[:, None] * tree.W
    lhs, rhs, gap = check_duality(tree, lambda t, s: a1 * np.cos(t - s), lambda t, s: a2 * (1 + s) + 0 * t,
                                  1.0 + tree.W, psi, diagonal=False)
    assert gap <= 1e-12 * max(1.0, abs(lhs))


def test_duality_zero_kernels_exact():
    for N in (4, 8):
        tree = ScenarioTree.build(1.0, N)
        psi = np.broadcast_to(tree.W[-1] ** 2, tree.W.shape)
        assert check_duality(tree, None, None, 1.0 + tree.W, psi)[2] <= 1e-12


def test_duality_gap_first_order():
    gaps = []
    for N in (4, 8, 16):
        tree = ScenarioTree.build(1.0, N)
        psi = np.broadcast_to(1.0 + tree.W[-1], tree.W.shape)
        gaps.append(check_duality(tree, lambda t, s: np.cos(t - s), lambda t, s: 0.5 + 0 * t, 1.0 + tree.W, psi)[2])
    assert 1.5 <= gaps[0] / gaps[1] <= 2.5 and 1.5 <= gaps[1] / gaps[2] <= 2.5


def test_variational_remainder_shrinks_on_nonlinear_instance():
    prob = nonlinear_control_instance(TREE6)
    rows = convergence_diagnostics(prob, 0.3 * np.cos(TREE6.W), np.sin(TREE6.W), (1e-1, 1e-2, 1e-3))
    for key in ("X_int", "Y_int", "X_T"):
        vals = [r[key] for r in rows]
        assert vals[0] > vals[1] > vals[2] > 0
        # second-order remainder: squared error drops about 100x per decade
        assert vals[1] / vals[2] > 30


def test_variational_remainder_vanishes_on_linear_instance():
    prob = random_lq_problem(TREE6, np.random.default_rng(4))
    rows = convergence_diagnostics(prob, np.sin(TREE6.W), np.cos(TREE6.W), (1e-1, 1e-2, 1e-3))
    for r in rows:
        assert r["X_int"] < 1e-18 and r["Y_int"] < 1e-18 and r["Y_0"] < 1e-18


def test_variational_matches_finite_difference():
    prob = nonlinear_control_instance(TREE6)
    u, v = 0.2 * TREE6.W, np.cos(TREE6.W)
    base = solve_state(prob, u)
    var = solve_variational(prob, base, v)
    eps = 1e-6
    up, dn = solve_state(prob, u + eps * v), solve_state(prob, u - eps * v)
    assert np.allclose((up.X - dn.X) / (2 * eps), var.xi, atol=1e-7)
    assert np.allclose((up.Y - dn.Y) / (2 * eps), var.eta, atol=1e-7)


def test_terminal_density_representation():
    tree = TREE6
    F = np.exp(tree.W[-1]) * np.sin(tree.W[3])
    E, pi = terminal_density(tree, F)
    assert np.allclose(E[0], F.mean())
    assert np.allclose(F, E[0] + (pi * tree.dW).sum(axis=0))


def test_maximum_condition_detects_non_optimal_control():
    prob = random_lq_problem(TREE6, np.random.default_rng(1))
    st_ = solve_state(prob, np.zeros(TREE6.W.shape))
    adj = solve_adjoint(prob, st_)
    worst, (level, node) = check_maximum_principle(prob, adj, st_)
    H = hamiltonian_coefficient(prob, adj, st_)
    assert worst > 0
    assert worst == pytest.approx(np.max(np.abs(H)))
    assert 0 <= level < TREE6.N and 0 <= node < 2 ** level
    assert hamiltonian(prob, adj, st_, level, node, 1.0) == pytest.approx(-tree_node(H, level, node))
    with pytest.raises(SpecError):
        check_maximum_principle(ControlProblem(tree=TREE6, phi=0.0, coeffs=prob.coeffs, psi=prob.psi,
                                               generator=prob.generator, U=ControlSet(-1, 1)),
                                adj, st_, v_samples=[3.0])


def tree_node(H, level, node):
    return float(TREE6.node_values(H[level], level)[node])
