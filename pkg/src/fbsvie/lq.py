"""Linear-quadratic control of a linear backward Volterra equation.

State and cost:

    Y_i = psi_i + sum_{j>i} [l1(t_i,t_j) Y_j + l2(t_i,t_j) u_j + l3(t_i,t_j) Z(j,i)] h - sum_{j>=i} Z(i,j) dW_j
    J(u) = E sum_{i<N} (Q'_i Y_i^2 + R'_i u_i^2) h / 2 + G' Y_0^2 / 2

The adjoint is a forward linear Volterra equation whose free term carries
the state:

    P_i = Q'_i Y_i + [l1(0,t_i) + l3(0,t_i) dW_0 / h] G' Y_0 + sum_{j<i} l1(t_j,t_i) P_j h
          + sum_{j<i} l3(t_j,t_i) P_j dW_j            (i >= 1),   P_0 = Q'_0 Y_0

and the optimal control solves the pointwise stationarity condition

    R'_j u_j + G' Y_0 l2(0,t_j) + sum_{k<j} l2(t_k,t_j) P_k h = 0     (j >= 1)

projected onto the control set (u_0 = 0 because u_0 does not reach the
state). The control-state coupling is resolved by damped fixed-point
iteration on u. Kernels l1, l2, l3 are deterministic functions ``f(t, s)``.
"""

import dataclasses
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .control import (
    ControlProblem,
    evaluate_cost,
    hamiltonian_coefficient,
    solve_adjoint,
    solve_state,
)
from .errors import ConvergenceError, SpecError
from .forward import forward_volterra
from .processes import CoefficientSpec, ControlSet, GeneratorSpec, as_process


def _zero_kernel(t, s):
    return 0.0 * (t + s)


@dataclass
class LqSpec:
    """Data of the linear-quadratic problem.

    ``Qw`` and ``Rw`` are the state and control weights (scalars, per-time
    vectors or adapted arrays), ``G`` the weight on Y_0 (its mean is used
    because Y_0 is deterministic).
    """

    tree: object
    psi: object
    l1: object = None
    l2: object = None
    l3: object = None
    Qw: object = 0.0
    Rw: object = 1.0
    G: object = 0.0
    U: ControlSet = field(default_factory=ControlSet)

    def __post_init__(self):
        tree = self.tree
        self.l1 = self.l1 or _zero_kernel
        self.l2 = self.l2 or _zero_kernel
        self.l3 = self.l3 or _zero_kernel
        self.Qa = as_process(tree, self.Qw, "state weight")
        self.Ra = as_process(tree, self.Rw, "control weight")
        self.psi_a = as_process(tree, self.psi, "terminal family")
        self.Gbar = float(np.mean(self.G))
        if not np.all(self.Ra > 0):
            raise SpecError("control weight must be bounded away from zero")
        if np.any(self.Qa < 0) or np.any(np.asarray(self.G) < 0):
            raise SpecError("state weights must be nonnegative")
        self.delta = float(self.Ra.min())

    def problem(self):
        """The same problem in the general control framework."""
        tree = self.tree
        Qa, Ra, G = self.Qa, self.Ra, self.Gbar
        at = _time_rows(tree)
        l1, l2, l3 = self.l1, self.l2, self.l3
        coeffs = CoefficientSpec(
            l=lambda s, x, y, v: 0.5 * (at(Qa, s) * y ** 2 + at(Ra, s) * v ** 2),
            l_y=lambda s, x, y, v: at(Qa, s) * y,
            l_v=lambda s, x, y, v: at(Ra, s) * v,
            gamma=lambda y: 0.5 * G * y ** 2,
            gamma_y=lambda y: G * y,
        )
        gen = GeneratorSpec(
            g=lambda t, s, x, y, z, zeta, v: l1(t, s) * y + l2(t, s) * v + l3(t, s) * zeta,
            g_y=lambda t, s, x, y, z, zeta, v: l1(t, s),
            g_v=lambda t, s, x, y, z, zeta, v: l2(t, s),
            g_zeta=lambda t, s, x, y, z, zeta, v: l3(t, s),
            name="lq",
        )
        return ControlProblem(tree=tree, phi=0.0, coeffs=coeffs, psi=self.psi_a, generator=gen, U=self.U)


def _time_rows(tree):
    """Map grid times (scalar or column) to the matching rows of an array."""
    h = tree.h

    def at(arr, s):
        s = np.asarray(s, dtype=float)
        idx = np.rint(s / h).astype(int)
        if idx.ndim == 0:
            return arr[int(idx)]
        return arr[idx.reshape(-1)]

    return at


@dataclass
class LqResult:
    u: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    P: np.ndarray
    J: float
    sweeps: int
    history: list


def solve_adjoint_P(spec, Y):
    """Adjoint P for the state process ``Y`` (point mass at zero excluded)."""
    tree = spec.tree
    N, h, t = tree.N, tree.h, tree.t
    Y = np.asarray(Y, dtype=float)
    Y0 = float(tree.expectation(Y[0]))
    free = spec.Qa * Y
    free[0] += spec.Gbar * Y0 / h

    def step(j, pj):
        a = np.asarray(spec.l1(t[j], t[j + 1:, None]), dtype=float)
        b = np.asarray(spec.l3(t[j], t[j + 1:, None]), dtype=float)
        return a * pj, b * pj

    P = forward_volterra(tree, free, step)
    P[0] = spec.Qa[0] * Y[0]
    return P


def stationarity_terms(spec, P, Y0):
    """G' Y_0 l2(0,t_j) + sum_{k<j} l2(t_k,t_j) P_k h for j < N (zero at j = 0)."""
    tree = spec.tree
    N, h, t = tree.N, tree.h, tree.t
    S = np.zeros((N + 1, tree.n_paths))
    Pm = np.asarray(P, dtype=float).copy()
    Pm[0] = Pm[0] + spec.Gbar * Y0 / h
    for k in range(N):
        S[k + 1:] += h * np.asarray(spec.l2(t[k], t[k + 1:, None]), dtype=float) * Pm[k]
    return S[:N]


def feedback_control(spec, P, Y0=0.0):
    """Pointwise minimiser of the Hamiltonian, projected onto U."""
    tree = spec.tree
    if spec.delta <= 0:
        raise SpecError("control weight below its lower bound")
    S = stationarity_terms(spec, P, Y0)
    u = np.zeros((tree.N + 1, tree.n_paths))
    u[: tree.N] = spec.U.project(-S / spec.Ra[: tree.N])
    return u


def _unprojected_feedback(spec, prob, u):
    tree = spec.tree
    N = tree.N
    st = solve_state(prob, u)
    Y0 = float(tree.expectation(st.Y[0]))
    P = solve_adjoint_P(spec, st.Y)
    out = np.zeros_like(u)
    out[:N] = -stationarity_terms(spec, P, Y0) / spec.Ra[:N]
    return out, st, Y0, P


def feedback_spectral_radius(spec, iters=40, seed=0):
    """Largest eigenvalue of the linear part of u -> -(feedback of u).

    Damped iteration with damping d converges when d < 2 / (1 + lambda).
    The probe directions ignore the control set.
    """
    prob = dataclasses.replace(spec.problem(), U=ControlSet())
    tree = spec.tree
    N, L = tree.N, tree.n_paths
    base = _unprojected_feedback(spec, prob, np.zeros((N + 1, L)))[0]
    v = np.zeros((N + 1, L))
    rng = np.random.default_rng(seed)
    for k in range(N):
        v[k] = tree.project(rng.standard_normal(L), k)
    lam = 0.0
    for _ in range(iters):
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
        w = base - _unprojected_feedback(spec, prob, v)[0]
        lam = float(np.sum(w * v))
        v = w
    return max(lam, 0.0)


def solve_lq(spec, damping="auto", tol_u=1e-12, tol_y0=1e-10, max_sweeps=5000):
    """Optimal control by damped fixed point on the feedback map.

    Each sweep is ``u <- proj_U((1 - d) u + d * feedback(u))``. With
    ``damping="auto"`` the step is ``2 / (2 + 1.05 lambda)`` capped at 0.5,
    where lambda comes from :func:`feedback_spectral_radius`.
    """
    prob = spec.problem()
    tree = spec.tree
    if damping == "auto":
        lam = feedback_spectral_radius(spec)
        damping = min(0.5, 2.0 / (2.0 + 1.05 * lam))
    u = np.zeros((tree.N + 1, tree.n_paths))
    y0_old = None
    history = []
    for sweep in range(1, max_sweeps + 1):
        raw, st, Y0, P = _unprojected_feedback(spec, prob, u)
        target = spec.U.project(raw)
        target[tree.N] = 0.0
        du = float(np.max(np.abs(target - u)))
        dy = np.inf if y0_old is None else abs(Y0 - y0_old)
        history.append((du, dy))
        if du < tol_u and dy < tol_y0:
            J = evaluate_cost(prob, u, st)
            return LqResult(u=u, Y=st.Y, Z=st.Z, P=P, J=J, sweeps=sweep, history=history)
        if not np.isfinite(du) or (sweep > 50 and du > 1e3 * history[0][0]):
            break
        u = spec.U.project((1.0 - damping) * u + damping * raw)
        u[tree.N] = 0.0
        y0_old = Y0
    raise ConvergenceError(f"feedback iteration did not converge in {sweep} sweeps (damping {damping:g})")


def stationarity_residual(spec, res, interior_tol=1e-12):
    """max |R' u + G' Y_0 l2(0,.) + sum l2 P h| over nodes where u is interior."""
    tree = spec.tree
    N = tree.N
    Y0 = float(tree.expectation(res.Y[0]))
    r = spec.Ra[:N] * res.u[:N] + stationarity_terms(spec, res.P, Y0)
    inside = (res.u[:N] > spec.U.lo + interior_tol) & (res.u[:N] < spec.U.hi - interior_tol)
    return float(np.max(np.abs(r[inside]), initial=0.0))


def coupled_residuals(spec, res):
    """Residuals of the adjoint line and the state line of the coupled system.

    Both are evaluated by direct summation over all pairs (i, j), with the
    control replaced by the feedback of P.
    """
    tree = spec.tree
    N, h, t, dW = tree.N, tree.h, tree.t, tree.dW
    Y, Z, P = res.Y, res.Z, res.P
    Y0 = float(tree.expectation(Y[0]))
    G = spec.Gbar
    r1 = 0.0
    for i in range(N + 1):
        rhs = spec.Qa[i] * Y[i]
        if i >= 1:
            rhs = rhs + (spec.l1(0.0, t[i]) + spec.l3(0.0, t[i]) * dW[0] / h) * G * Y0
            for j in range(i):
                rhs = rhs + spec.l1(t[j], t[i]) * P[j] * h + spec.l3(t[j], t[i]) * P[j] * dW[j]
        r1 = max(r1, float(np.max(np.abs(P[i] - rhs))))
    u = feedback_control(spec, P, Y0)
    r2 = 0.0
    for i in range(N + 1):
        rhs = spec.psi_a[i].copy()
        for j in range(i + 1, N):
            rhs += (spec.l1(t[i], t[j]) * Y[j] + spec.l2(t[i], t[j]) * u[j] + spec.l3(t[i], t[j]) * Z[j, i]) * h
        for j in range(i, N):
            rhs -= Z[i, j] * dW[j]
        r2 = max(r2, float(np.max(np.abs(Y[i] - rhs))))
    return r1, r2


def control_from_nodes(tree, values):
    """Adapted control from node values listed level by level (levels < N)."""
    u = np.zeros((tree.N + 1, tree.n_paths))
    pos = 0
    for k in range(tree.N):
        n = 1 << k
        u[k] = tree.expand(np.asarray(values[pos:pos + n], dtype=float), k)
        pos += n
    return u


def brute_force_lq(spec, grid, max_evals=20000):
    """Best control over a per-node grid, or a bounded descent when too large.

    Returns ``(u, J)``. Exhaustive enumeration is used when
    ``len(grid) ** (2**N - 1) <= max_evals``; otherwise L-BFGS-B with the
    exact gradient from the adjoint system.
    """
    prob = spec.problem()
    tree = spec.tree
    n_nodes = (1 << tree.N) - 1
    grid = [float(g) for g in grid if spec.U.contains(g)]
    if len(grid) ** n_nodes <= max_evals:
        best = (np.inf, None)
        for combo in itertools.product(grid, repeat=n_nodes):
            u = control_from_nodes(tree, combo)
            J = evaluate_cost(prob, u)
            if J < best[0]:
                best = (J, u)
        return best[1], best[0]

    def fun(x):
        u = control_from_nodes(tree, x)
        st = solve_state(prob, u)
        J = evaluate_cost(prob, u, st)
        adj = solve_adjoint(prob, st)
        grad = []
        H = hamiltonian_coefficient(prob, adj, st)
        for k in range(tree.N):
            grad.extend(tree.node_values(H[k], k) * tree.h / (1 << k))
        return J, np.asarray(grad)

    lo = None if not np.isfinite(spec.U.lo) else spec.U.lo
    hi = None if not np.isfinite(spec.U.hi) else spec.U.hi
    x0 = np.clip(np.zeros(n_nodes), spec.U.lo, spec.U.hi)
    out = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=[(lo, hi)] * n_nodes,
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 2000})
    u = control_from_nodes(tree, out.x)
    return u, evaluate_cost(prob, u)
