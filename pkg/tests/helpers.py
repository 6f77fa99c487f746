"""Independent oracles and test instances shared by several test modules."""

import numpy as np

from fbsvie.control import ControlProblem
from fbsvie.processes import CoefficientSpec, GeneratorSpec


def dense_linear_solve(tree, psi, a, b, c, d, diagonal=True):
    """All-unknowns least-squares solve of the discrete linear BSVIE.

    Unknowns are the node values of Y_i and of every Z(i, j). Equations are
    the pathwise BSVIE for each i and leaf, plus the M-condition
    Y_i = E Y_i + sum_{j<i} Z(i,j) dW_j on each leaf.
    """
    N, h, L = tree.N, tree.h, tree.n_paths
    index, n = {}, 0
    for i in range(N + 1):
        for key, level in [(("Y", i), i)] + [(("Z", i, j), j) for j in range(N)]:
            index[key] = (n, level)
            n += 1 << level

    def col(key, leaf):
        off, lv = index[key]
        return off + (leaf >> (N - lv))

    rows, rhs = [], []
    for i in range(N + 1):
        steps = range(i, N) if diagonal else range(i + 1, N)
        for leaf in range(L):
            r = np.zeros(n)
            r[col(("Y", i), leaf)] += 1.0
            for j in steps:
                r[col(("Y", j), leaf)] -= h * a
                r[col(("Z", i, j), leaf)] -= h * b
                r[col(("Z", j, i), leaf)] -= h * c
            for j in range(i, N):
                r[col(("Z", i, j), leaf)] += tree.dW[j, leaf]
            rows.append(r)
            rhs.append(psi[i, leaf] + d * h * len(steps))
            m = np.zeros(n)
            m[col(("Y", i), leaf)] += 1.0
            off, lv = index[("Y", i)]
            m[off: off + (1 << lv)] -= 1.0 / (1 << lv)
            for j in range(i):
                m[col(("Z", i, j), leaf)] -= tree.dW[j, leaf]
            rows.append(m)
            rhs.append(0.0)
    A, rhs = np.array(rows), np.array(rhs)
    x, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    assert np.max(np.abs(A @ x - rhs)) < 1e-10
    Y = np.zeros((N + 1, L))
    Z = np.zeros((N + 1, N, L))
    for leaf in range(L):
        for i in range(N + 1):
            Y[i, leaf] = x[col(("Y", i), leaf)]
            for j in range(N):
                Z[i, j, leaf] = x[col(("Z", i, j), leaf)]
    return Y, Z


def random_lq_problem(tree, rng):
    """Linear state, quadratic costs, random time-dependent coefficients."""
    a = rng.normal(size=12) * 0.5
    q, r_, c, k, G = np.abs(rng.normal(size=5)) + 0.1
    coeffs = CoefficientSpec(
        b=lambda t, s, x, v: a[0] * np.cos(t - s) * x + a[1] * v,
        b_x=lambda t, s, x, v: a[0] * np.cos(t - s),
        b_v=lambda t, s, x, v: a[1] + 0 * x,
        sigma=lambda t, s, x, v: a[2] * x + a[3] * np.exp(s - t) * v,
        sigma_x=lambda t, s, x, v: a[2] + 0 * x,
        sigma_v=lambda t, s, x, v: a[3] * np.exp(s - t) + 0 * x,
        l=lambda s, x, y, v: 0.5 * (q * x ** 2 + r_ * y ** 2 + c * v ** 2) + a[4] * x * v,
        l_x=lambda s, x, y, v: q * x + a[4] * v,
        l_y=lambda s, x, y, v: r_ * y,
        l_v=lambda s, x, y, v: c * v + a[4] * x,
        h=lambda x: 0.5 * k * x ** 2 + a[5] * x,
        h_x=lambda x: k * x + a[5],
        gamma=lambda y: 0.5 * G * y ** 2,
        gamma_y=lambda y: G * y,
    )
    gen = GeneratorSpec(
        g=lambda t, s, x, y, z, zeta, v: a[6] * y + a[7] * (1 + t) * zeta + a[8] * x + a[9] * v + a[10],
        g_x=lambda t, s, x, y, z, zeta, v: a[8] + 0 * x,
        g_y=lambda t, s, x, y, z, zeta, v: a[6] + 0 * t,
        g_zeta=lambda t, s, x, y, z, zeta, v: a[7] * (1 + t) + 0 * s,
        g_v=lambda t, s, x, y, z, zeta, v: a[9] + 0 * x,
    )
    psi = np.cos(tree.W[-1])[None, :] + a[11] * tree.t[:, None]
    return ControlProblem(tree=tree, phi=1.0 + 0.5 * tree.t, coeffs=coeffs, psi=psi, generator=gen)
