import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fbsvie.errors import InfeasibleControlError, NonFiniteError, SpecError
from fbsvie.lattice import ScenarioTree
from fbsvie.processes import (
    CoefficientSpec,
    ControlSet,
    GeneratorSpec,
    MSolution,
    as_process,
    check_finite,
    linear_generator,
    m_completion,
    m_condition_residual,
    make_generator,
    register_generator,
    weighted_norm,
)

TREE4 = ScenarioTree.build(1.0, 4)


def test_as_process_shapes():
    assert as_process(TREE4, 2.0).shape == (5, 16)
    per_time = as_process(TREE4, np.arange(5.0))
    assert np.all(per_time[3] == 3.0)
    assert np.allclose(as_process(TREE4, lambda t: t ** 2)[:, 0], TREE4.t ** 2)
    with pytest.raises(SpecError):
        as_process(TREE4, np.ones((3, 16)))


def test_check_finite_names_node():
    bad = np.zeros(16)
    bad[9] = np.nan
    with pytest.raises(NonFiniteError) as info:
        check_finite(bad, "state", 2, TREE4)
    assert (info.value.level, info.value.node, info.value.term) == (2, 9 >> 2, "state")


@settings(max_examples=25, deadline=None)
@given(arrays(float, (5, 16), elements=st.floats(-100, 100)))
def test_m_completion_satisfies_identity(raw):
    Y = np.stack([TREE4.project(raw[i], i) for i in range(5)])
    Z = m_completion(TREE4, Y)
    assert m_condition_residual(TREE4, Y, Z) < 1e-9
    # entries on and above the diagonal stay zero
    for i in range(5):
        assert np.all(Z[i, i:] == 0.0)


def test_m_residual_detects_wrong_z():
    Y = np.stack([TREE4.project(np.cos(TREE4.W[-1]), i) for i in range(5)])
    Z = m_completion(TREE4, Y)
    Z[3, 1] += 0.1
    assert m_condition_residual(TREE4, Y, Z) == pytest.approx(0.1 * np.sqrt(TREE4.h))


def test_weighted_norm_by_hand():
    tree = ScenarioTree.build(1.0, 2)
    y = np.ones((3, 4))
    z = np.zeros((3, 2, 4))
    z[0, 1] = 2.0
    h = 0.5
    # i=0: 1 + h*4 ; i=1: 1 ; weights h e^{beta t_i}
    beta = 0.7
    expect = np.sqrt(h * (1 + h * 4) + h * np.exp(beta * 0.5) * 1.0)
    assert weighted_norm(tree, y, z, beta) == pytest.approx(expect)
    with pytest.raises(SpecError):
        weighted_norm(tree, y, z, -1.0)


def test_msolution_zeros():
    sol = MSolution.zeros(TREE4)
    assert sol.Y.shape == (5, 16) and sol.Z.shape == (5, 4, 16)
    assert sol.m_residual(TREE4) == 0.0


def test_generator_check_accepts_correct_derivatives():
    gen = GeneratorSpec(
        g=lambda t, s, x, y, z, zeta, v: np.sin(y) + x * v + 0.3 * zeta ** 2,
        g_x=lambda t, s, x, y, z, zeta, v: v,
        g_y=lambda t, s, x, y, z, zeta, v: np.cos(y),
        g_zeta=lambda t, s, x, y, z, zeta, v: 0.6 * zeta,
        g_v=lambda t, s, x, y, z, zeta, v: x,
    )
    assert gen.check()


def test_generator_check_rejects_wrong_derivative():
    gen = GeneratorSpec(g=lambda t, s, x, y, z, zeta, v: 2.0 * y, g_y=lambda *a: 1.0)
    with pytest.raises(SpecError, match="g_y"):
        gen.check()
    missing = GeneratorSpec(g=lambda t, s, x, y, z, zeta, v: y * zeta)
    with pytest.raises(SpecError):
        missing.check()


def test_generator_check_rejects_false_lipschitz_bound():
    gen = GeneratorSpec(g=lambda t, s, x, y, z, zeta, v: 3.0 * y, g_y=lambda *a: 3.0, L1=1.0, L2=0.0, L3=0.0)
    with pytest.raises(SpecError, match="Lipschitz"):
        gen.check()


def test_coefficient_check():
    good = CoefficientSpec(
        b=lambda t, s, x, v: np.exp(-(t - s)) * x + v,
        b_x=lambda t, s, x, v: np.exp(-(t - s)),
        b_v=lambda t, s, x, v: 1.0,
        l=lambda s, x, y, v: x * y + v ** 2,
        l_x=lambda s, x, y, v: y,
        l_y=lambda s, x, y, v: x,
        l_v=lambda s, x, y, v: 2 * v,
        h=np.cos,
        h_x=lambda x: -np.sin(x),
    )
    assert good.check()
    bad = CoefficientSpec(h=np.cos, h_x=np.sin)
    with pytest.raises(SpecError, match="h_x"):
        bad.check()
    huge = CoefficientSpec(b=lambda t, s, x, v: 1e7 * x, b_x=lambda t, s, x, v: 1e7)
    with pytest.raises(SpecError, match="bound"):
        huge.check(tol=1.0)


def test_control_set():
    U = ControlSet(-1.0, 2.0)
    assert np.all(U.project(np.array([-3.0, 0.5, 9.0])) == [-1.0, 0.5, 2.0])
    assert U.contains(np.array([-1.0, 2.0]))
    with pytest.raises(InfeasibleControlError):
        U.require(np.array([2.5]))
    s = U.samples(np.array([1.5]))
    assert s.shape == (33, 1)
    assert s.min() == pytest.approx(0.5) and s.max() == pytest.approx(2.0)
    with pytest.raises(SpecError):
        ControlSet(1.0, 0.0)


def test_presets():
    g = make_generator("linear_bsvie", a=1.0, c=2.0, d=3.0)
    assert g(0, 0, 0, 1.0, 5.0, 1.0, 0) == pytest.approx(6.0)
    assert not g.depends_on_z
    assert make_generator("linear_bsvie", b=1.0).depends_on_z
    assert make_generator("finance_case2", k1=0.5, k2=1.0)(0, 0, 0, 9.0, 0, 2.0, 0) == pytest.approx(2.0)
    for key in ("zero", "lipschitz_y", "lipschitz_zeta", "mixed", "finance_risk"):
        assert make_generator(key).check()
    with pytest.raises(SpecError):
        make_generator("nope")


def test_register_generator_runs_self_check():
    register_generator("scaled", lambda: linear_generator(a=2.0, name="scaled"))
    assert make_generator("scaled")(0, 0, 0, 1.5, 0, 0, 0) == 3.0
    broken = lambda: GeneratorSpec(g=lambda t, s, x, y, z, zeta, v: y ** 2)  # noqa: E731
    with pytest.raises(SpecError):
        register_generator("broken", broken)
