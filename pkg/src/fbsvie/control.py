"""Optimal control of coupled forward-backward Volterra systems.

State system on the tree (control ``u``):

    X_i = phi_i + sum_{j<i} b(t_i, t_j, X_j, u_j) h + sum_{j<i} sigma(t_i, t_j, X_j, u_j) dW_j
    Y_i = psi_i + sum_{j in D_i} g(t_i, t_j, X_j, Y_j, ., Z(j,i), u_j) h - sum_{j>=i} Z(i,j) dW_j
    J(u) = E[sum_{i<N} l(t_i, X_i, Y_i, u_i) h + h(X_N) + gamma(Y_0)]

The generator may not depend on Z(t, s) itself, only on the reflected value
Z(s, t). With the strict rule D_i = {i+1, ..., N-1} (the default here) the
discrete adjoint below is the exact transpose of the discrete variational
system, so the Gateaux derivative of J equals E sum_j v_j L_j h to round-off
whenever the y- and zeta-partials of g are deterministic. Forward kernels
b, sigma and the costs may be nonlinear.

Adjoint system:

    P_i = l_y(i) + sum_{j<i} g_y(j,i) P_j h + sum_{j<i} g_zeta(j,i) P_j dW_j,
          plus gamma_y(Y_0)/h added at i = 0
    F_i = l_x(i) + b_x(N,i) h_x(X_N) + sigma_x(N,i) pi_i + sum_{k<i} g_x(k,i) P_k h
    Q_i = F_i + sum_{j in D_i} [b_x(j,i) Q_j + sigma_x(j,i) R(j,i)] h - sum_{j>=i} R(i,j) dW_j

where pi is the martingale density of h_x(X_N). The point mass at i = 0
reproduces the terms gamma_y g_y(0,t) and gamma_y g_zeta(0,t) dW_0 / h of the
adjoint free term; the exported ``P`` omits it (``P[0] = l_y(0)``).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsvie import PicardConfig, PicardReport, picard_iterate, solve_causal
from .errors import SpecError
from .forward import forward_volterra, solve_linear_forward_svie
from .processes import (
    CoefficientSpec,
    ControlSet,
    GeneratorSpec,
    as_process,
)


@dataclass
class ControlProblem:
    """All data of the control problem except the candidate control.

    ``solver`` selects how backward equations are solved: the direct causal
    sweep (default) or Picard iteration with the ``picard`` settings.
    """

    tree: object
    phi: object
    coeffs: CoefficientSpec
    psi: object
    generator: GeneratorSpec
    U: ControlSet = field(default_factory=ControlSet)
    diagonal: bool = False
    solver: str = "causal"
    picard: PicardConfig = field(default_factory=lambda: PicardConfig(beta=0.0, tol=1e-13, max_iter=200))

    def __post_init__(self):
        if self.solver not in ("causal", "picard"):
            raise SpecError(f"unknown backward solver {self.solver!r}")
        if self.generator.g_z is not None:
            raise SpecError("control generators may depend on Z(s,t) but not on Z(t,s)")


@dataclass
class State:
    u: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    report: Optional[PicardReport] = None


@dataclass
class VariationalSolution:
    """Derivative of the state along a control direction."""

    xi: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    phi1: np.ndarray
    psi1: np.ndarray


@dataclass
class AdjointSolution:
    """Adjoint processes. ``R`` holds the full two-parameter array."""

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    pi: np.ndarray
    Eh: np.ndarray
    gamma_y: float
    report: Optional[PicardReport] = None

    def P_with_mass(self, h):
        """P including the point mass gamma_y / h at time zero."""
        P = self.P.copy()
        P[0] = P[0] + self.gamma_y / h
        return P


def _ev(f, shape, *args):
    if f is None:
        return np.zeros(shape)
    return np.broadcast_to(np.asarray(f(*args), dtype=float), shape)


def _solve_backward(prob, psi, drift):
    if prob.solver == "picard":
        return picard_iterate(prob.tree, psi, drift, prob.diagonal, prob.picard)
    return solve_causal(prob.tree, psi, drift, prob.diagonal), None


def solve_state(prob, u):
    """Solve the forward equation, then the backward equation given X."""
    tree = prob.tree
    u = as_process(tree, u, "control")
    prob.U.require(u)
    c = prob.coeffs
    t = tree.t
    shape = lambda j: (tree.N - j, tree.n_paths)  # noqa: E731

    def step(j, xj):
        tt = t[j + 1:, None]
        d = None if c.b is None else np.broadcast_to(c.b(tt, t[j], xj, u[j]), shape(j))
        s = None if c.sigma is None else np.broadcast_to(c.sigma(tt, t[j], xj, u[j]), shape(j))
        return d, s

    X = forward_volterra(tree, prob.phi, step)
    st = State(u=u, X=X, Y=None, Z=None)
    g = prob.generator.g

    def drift(j, rows, y, z, zeta):
        return np.broadcast_to(g(t[rows, None], t[j], X[j], y, z, zeta, u[j]), z.shape)

    sol, rep = _solve_backward(prob, prob.psi, drift)
    st.Y, st.Z, st.report = sol.Y, sol.Z, rep
    return st


def evaluate_cost(prob, u, state=None):
    """Discrete cost J(u)."""
    tree = prob.tree
    st = state or solve_state(prob, u)
    c = prob.coeffs
    N, h = tree.N, tree.h
    J = 0.0
    if c.l is not None:
        run = _ev(c.l, (N, tree.n_paths), tree.t[:N, None], st.X[:N], st.Y[:N], st.u[:N])
        J += h * float(tree.expectation(run).sum())
    if c.h is not None:
        J += float(tree.expectation(_ev(c.h, (tree.n_paths,), st.X[N])))
    if c.gamma is not None:
        J += float(tree.expectation(_ev(c.gamma, (tree.n_paths,), st.Y[0])))
    return J


def _gen_backward_args(st, t, j, rows):
    """Arguments of g(t_i, t_j, ...) for the outer rows ``rows`` at inner step j."""
    return (t[rows, None], t[j], st.X[j], st.Y[j], st.Z[rows, j], st.Z[j, rows], st.u[j])


def _gen_forward_args(st, t, j):
    """Arguments of g(t_j, t_i, ...) for i = j+1..N (state taken at t_i)."""
    N = len(t) - 1
    z = np.zeros((N - j,) + st.Z.shape[2:])
    z[: N - 1 - j] = st.Z[j, j + 1:]
    return (t[j], t[j + 1:, None], st.X[j + 1:], st.Y[j + 1:], z, st.Z[j + 1:, j], st.u[j + 1:])


def linear_drift(tree, coef):
    """Drift a(j, i) Y_j + c(j, i) Z(j, i) from a coefficient callback.

    ``coef(j, rows)`` returns the pair of coefficient arrays for the outer
    rows in the slice ``rows`` (either may be ``None``).
    """

    def drift(j, rows, y, z, zeta):
        a, c = coef(j, rows)
        out = np.zeros(z.shape)
        if a is not None:
            out += a * y
        if c is not None:
            out += c * zeta
        return out

    return drift


def solve_variational(prob, state, v_dir):
    """Linearised state at ``state`` along the direction ``v_dir``."""
    tree = prob.tree
    st = state
    v = as_process(tree, v_dir, "direction")
    c, gen = prob.coeffs, prob.generator
    N, h, t, L = tree.N, tree.h, tree.t, tree.n_paths

    def rows(f, j, xj):
        return _ev(f, (N - j, L), t[j + 1:, None], t[j], xj, st.u[j])

    def step_xi(j, xi_j):
        X_j = st.X[j]
        return (rows(c.b_x, j, X_j) * xi_j + rows(c.b_v, j, X_j) * v[j],
                rows(c.sigma_x, j, X_j) * xi_j + rows(c.sigma_v, j, X_j) * v[j])

    def step_phi1(j, _):
        X_j = st.X[j]
        return rows(c.b_v, j, X_j) * v[j], rows(c.sigma_v, j, X_j) * v[j]

    xi = forward_volterra(tree, 0.0, step_xi)
    phi1 = forward_volterra(tree, 0.0, step_phi1)

    psi1 = np.zeros((N + 1, L))
    for j in range(N):
        n = j + 1 if prob.diagonal else j
        if n:
            args = _gen_backward_args(st, t, j, slice(0, n))
            psi1[:n] += h * (_ev(gen.g_x, (n, L), *args) * xi[j] + _ev(gen.g_v, (n, L), *args) * v[j])

    def coef(j, rows):
        args = _gen_backward_args(st, t, j, rows)
        shape = st.Z[rows, j].shape
        return _ev(gen.g_y, shape, *args), _ev(gen.g_zeta, shape, *args)

    sol, _ = _solve_backward(prob, psi1, linear_drift(tree, coef))
    return VariationalSolution(xi=xi, eta=sol.Y, zeta=sol.Z, phi1=phi1, psi1=psi1)


def gateaux_derivative(prob, state, v_dir, var=None):
    """Directional derivative of J at ``state`` from the variational system."""
    tree = prob.tree
    st = state
    var = var or solve_variational(prob, st, v_dir)
    v = as_process(tree, v_dir)
    c = prob.coeffs
    N, h, L = tree.N, tree.h, tree.n_paths
    args = (tree.t[:N, None], st.X[:N], st.Y[:N], st.u[:N])
    run = (_ev(c.l_x, (N, L), *args) * var.xi[:N] + _ev(c.l_y, (N, L), *args) * var.eta[:N]
           + _ev(c.l_v, (N, L), *args) * v[:N])
    d = h * float(tree.expectation(run).sum())
    d += float(tree.expectation(_ev(c.h_x, (L,), st.X[N]) * var.xi[N]))
    d += float(tree.expectation(_ev(c.gamma_y, (L,), st.Y[0]) * var.eta[0]))
    return d


def terminal_density(tree, F):
    """Conditional expectations E_j F and martingale densities pi_j of F."""
    N = tree.N
    E = np.empty((N + 1, tree.n_paths))
    pi = np.zeros((N, tree.n_paths))
    cur = np.asarray(F, dtype=float)
    E[N] = cur
    for j in range(N - 1, -1, -1):
        cur, pi[j] = tree.represent(cur, j)
        E[j] = cur
    return E, pi


def solve_adjoint(prob, state):
    """Adjoint processes (P, Q, R) and the density pi of h_x(X_N) at ``state``."""
    tree = prob.tree
    st = state
    c, gen = prob.coeffs, prob.generator
    N, h, t, L = tree.N, tree.h, tree.t, tree.n_paths
    full = (N + 1, L)
    cost_args = (t[:, None], st.X, st.Y, st.u)
    ly = _ev(c.l_y, full, *cost_args)
    lx = _ev(c.l_x, full, *cost_args)
    gy0 = float(tree.expectation(_ev(c.gamma_y, (L,), st.Y[0])))

    def step_P(j, Pj):
        args = _gen_forward_args(st, t, j)
        return _ev(gen.g_y, (N - j, L), *args) * Pj, _ev(gen.g_zeta, (N - j, L), *args) * Pj

    free = ly.copy()
    free[0] += gy0 / h
    P_mass = forward_volterra(tree, free, step_P)

    Hx = _ev(c.h_x, (L,), st.X[N])
    Eh, pi = terminal_density(tree, Hx)

    F = lx.copy()
    fargs = (t[-1], t[:N, None], st.X[:N], st.u[:N])
    F[:N] += _ev(c.b_x, (N, L), *fargs) * Hx + _ev(c.sigma_x, (N, L), *fargs) * pi
    for k in range(N):
        args = _gen_forward_args(st, t, k)
        F[k + 1:] += h * _ev(gen.g_x, (N - k, L), *args) * P_mass[k]

    def coef(j, rows):
        args = (t[j], t[rows, None], st.X[rows], st.u[rows])
        shape = st.X[rows].shape
        return _ev(c.b_x, shape, *args), _ev(c.sigma_x, shape, *args)

    sol, rep = _solve_backward(prob, F, linear_drift(tree, coef))
    P = P_mass.copy()
    P[0] = ly[0]
    return AdjointSolution(P=P, Q=sol.Y, R=sol.Z, pi=pi, Eh=Eh, gamma_y=gy0, report=rep)


def hamiltonian_coefficient(prob, adj, state):
    """The coefficient H_j of the control in the maximum condition, j < N.

    H_j = l_v + b_v(N,j) E_j h_x + sigma_v(N,j) pi_j + sum_{k<j} g_v(k,j) P_k h
          + E_j sum_{i=j+1}^{N-1} [Q_i b_v(i,j) + R(i,j) sigma_v(i,j)] h
    (P including its point mass at zero). Returns an (N, L) array.
    """
    tree = prob.tree
    st = state
    c, gen = prob.coeffs, prob.generator
    N, h, t, L = tree.N, tree.h, tree.t, tree.n_paths
    H = _ev(c.l_v, (N, L), t[:N, None], st.X[:N], st.Y[:N], st.u[:N]).copy()
    fargs = (t[-1], t[:N, None], st.X[:N], st.u[:N])
    H += _ev(c.b_v, (N, L), *fargs) * adj.Eh[:N] + _ev(c.sigma_v, (N, L), *fargs) * adj.pi
    P_mass = adj.P_with_mass(h)
    gv = np.zeros((N + 1, L))
    for k in range(N):
        args = _gen_forward_args(st, t, k)
        gv[k + 1:] += h * _ev(gen.g_v, (N - k, L), *args) * P_mass[k]
    H += gv[:N]
    for j in range(N - 1):
        args = (t[j + 1:N, None], t[j], st.X[j], st.u[j])
        m = N - 1 - j
        s = (_ev(c.b_v, (m, L), *args) * adj.Q[j + 1:N] + _ev(c.sigma_v, (m, L), *args) * adj.R[j + 1:N, j]).sum(axis=0)
        H[j] += h * tree.project(s, j)
    return H


def hamiltonian(prob, adj, state, level, node, v):
    """Maximisation-form Hamiltonian -H v at one node for scalar ``v``."""
    H = hamiltonian_coefficient(prob, adj, state)
    return -float(prob.tree.node_values(H[level], level)[node]) * v


def adjoint_derivative(prob, state, adj, v_dir, H=None):
    """E sum_j v_j H_j h, the directional derivative from the adjoint side."""
    tree = prob.tree
    H = hamiltonian_coefficient(prob, adj, state) if H is None else H
    v = as_process(tree, v_dir)
    return tree.h * float(tree.expectation(v[: tree.N] * H).sum())


def check_maximum_principle(prob, adj, state, v_samples=None, H=None):
    """Worst value of -H_j (v - u_j) over nodes and candidate values.

    ``v_samples`` is a list of reals in U; by default 33 equispaced points
    of U within distance 1 of the control at each node. Returns
    ``(worst, (level, node))``.
    """
    tree = prob.tree
    N = tree.N
    H = hamiltonian_coefficient(prob, adj, state) if H is None else H
    u = state.u[:N]
    if v_samples is None:
        V = prob.U.samples(u)
    else:
        V = np.asarray(v_samples, dtype=float)
        if not prob.U.contains(V):
            raise SpecError("sample values outside the control set")
        V = V.reshape((-1, 1, 1))
    viol = (-H * (V - u)).max(axis=0)
    k = int(np.argmax(viol))
    level, leaf = divmod(k, viol.shape[-1])
    node = leaf >> (N - level) if getattr(tree, "exact", False) else leaf
    return float(viol.max()), (level, node)


def check_duality(tree, A1, A2, phi, psi, diagonal=True, cfg=None):
    """Both sides of the forward/backward pairing identity.

    Forward: xi_i = phi_i + sum_{j<i} [A1(t_i,t_j) h + A2(t_i,t_j) dW_j] xi_j.
    Backward: Y_i = psi_i + sum_{D_i} [A1(t_j,t_i) Y_j + A2(t_j,t_i) Z(j,i)] h - sum Z dW.
    Returns ``(lhs, rhs, gap)`` with lhs = E sum_i xi_i psi_i h and
    rhs = E sum_i phi_i Y_i h over i < N.
    """
    N, h, t = tree.N, tree.h, tree.t
    phi = as_process(tree, phi)
    psi = as_process(tree, psi)
    xi = solve_linear_forward_svie(tree, A1, A2, phi)

    def kern(A, j, rows):
        if A is None:
            return None
        if callable(A):
            return np.asarray(A(t[j], t[rows, None]), dtype=float)
        A = np.asarray(A, dtype=float)
        r = A[j, rows]
        return r if r.ndim == 2 else r[:, None]

    drift = linear_drift(tree, lambda j, rows: (kern(A1, j, rows), kern(A2, j, rows)))
    if cfg is None:
        sol = solve_causal(tree, psi, drift, diagonal)
    else:
        sol, _ = picard_iterate(tree, psi, drift, diagonal, cfg)
    lhs = h * float(tree.expectation(xi[:N] * psi[:N]).sum())
    rhs = h * float(tree.expectation(phi[:N] * sol.Y[:N]).sum())
    return lhs, rhs, abs(lhs - rhs)


def convergence_diagnostics(prob, u, v_dir, rhos):
    """Remainder of the first-order expansion of the state for each rho.

    Returns rows ``{rho, X_int, Y_int, X_T, Y_0}`` holding E sum |Xt|^2 h,
    E sum |Yt|^2 h, E|Xt_N|^2 and |Yt_0|^2 with Xt = (X_rho - X)/rho - xi.
    """
    tree = prob.tree
    N, h = tree.N, tree.h
    base = solve_state(prob, u)
    var = solve_variational(prob, base, v_dir)
    v = as_process(tree, v_dir)
    out = []
    for rho in rhos:
        st = solve_state(prob, base.u + rho * v)
        Xt = (st.X - base.X) / rho - var.xi
        Yt = (st.Y - base.Y) / rho - var.eta
        out.append({
            "rho": float(rho),
            "X_int": h * float(tree.expectation(Xt[:N] ** 2).sum()),
            "Y_int": h * float(tree.expectation(Yt[:N] ** 2).sum()),
            "X_T": float(tree.expectation(Xt[N] ** 2)),
            "Y_0": float(tree.expectation(Yt[0] ** 2)),
        })
    return out
