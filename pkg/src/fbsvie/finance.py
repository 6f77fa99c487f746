"""Risk-minimising portfolios driven by a backward Volterra risk measure.

Wealth (discounted SDE written as a degenerate forward Volterra equation):

    X_{k+1} = X_k + [rho_k X_k + v_k (alpha_k - rho_k)] h + v_k beta_k dW_k

Risk of a portfolio v is Y(0) of

    Y(t) = -psi(t) + int_t^T [r(s) Y(s) + k1(t,s) Z(s,t) + k2(t,s)] ds - int_t^T Z(t,s) dW(s)
    psi(t) = h(X(T)) + int_t^T [l1(t,s) X(s) + l2(t,s) v(s)] ds

Coefficient conventions: ``rho`` is deterministic (scalar or function of
t); ``alpha`` and ``beta`` may also be adapted arrays of shape (N+1, L).
``r`` is a scalar, a function of s, or an adapted array (random rate).
``l1``, ``l2``, ``k1``, ``k2`` are scalars or functions ``f(t, s)``; ``k1``
and ``k2`` may also be adapted arrays depending on s only.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad

from .bsvie import BsvieSpec, PicardConfig, generator_drift, picard_solve, solve_bsvie_direct, solve_causal
from .control import ControlProblem, hamiltonian_coefficient, solve_adjoint, solve_state, terminal_density
from .errors import ConvergenceError, SpecError
from .forward import ForwardSpec, solve_forward
from .processes import CoefficientSpec, GeneratorSpec, as_process


def _lookup(tree, arr):
    """f(s) returning the rows of ``arr`` at grid times s (scalar or column)."""
    h = tree.h

    def at(s):
        idx = np.rint(np.asarray(s, dtype=float) / h).astype(int)
        if idx.ndim == 0:
            return arr[int(idx)]
        return arr[idx.reshape(-1)]

    return at


def _rate(tree, value):
    """Function of s for a rate given as scalar, callable or adapted array."""
    if callable(value):
        return value
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        c = float(a)
        return lambda s: c + 0.0 * np.asarray(s, dtype=float)
    return _lookup(tree, as_process(tree, a, "rate"))


def _kernel(tree, value):
    """Function of (t, s) for a kernel given as scalar, callable or adapted array."""
    if callable(value):
        return value
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        c = float(a)
        return lambda t, s: c + 0.0 * (np.asarray(t, dtype=float) + np.asarray(s, dtype=float))
    at = _lookup(tree, as_process(tree, a, "kernel"))
    return lambda t, s: at(s)


def _scalar_fn(value):
    """Deterministic function of one time variable (for closed forms)."""
    if callable(value):
        return value
    c = float(value)
    return lambda s: c


def _integral(f, a, b):
    if b <= a:
        return 0.0
    return quad(lambda s: float(f(s)), a, b, limit=200)[0]


def _cumulative(f, t):
    """int_0^{t_i} f for every grid time."""
    out = np.zeros(len(t))
    for i in range(1, len(t)):
        out[i] = out[i - 1] + _integral(f, t[i - 1], t[i])
    return out


def _is_deterministic(a, tol=0.0):
    a = np.asarray(a, dtype=float)
    return bool(np.all(np.abs(a - a[..., :1]) <= tol))


@dataclass
class MarketSpec:
    """Interest rate ``rho``, appreciation ``alpha``, volatility ``beta``, wealth ``x0``."""

    rho: object = 0.0
    alpha: object = 0.0
    beta: object = 1.0
    x0: float = 1.0
    beta_min: float = 1e-8

    def arrays(self, tree):
        rho = as_process(tree, self.rho, "interest rate")
        if not _is_deterministic(rho):
            raise SpecError("the interest rate must be deterministic")
        alpha = as_process(tree, self.alpha, "appreciation rate")
        beta = as_process(tree, self.beta, "volatility")
        if np.any(np.abs(beta) < self.beta_min):
            raise SpecError("volatility must be bounded away from zero")
        return rho, alpha, beta

    def theta(self, tree):
        """Market price of risk (alpha - rho) / beta."""
        rho, alpha, beta = self.arrays(tree)
        return (alpha - rho) / beta


@dataclass
class RiskSpec:
    """Coefficients of the risk equation and the utility ``h`` with derivative ``h_x``."""

    r: object = 0.0
    l1: object = 0.0
    l2: object = 0.0
    k1: object = 0.0
    k2: object = 0.0
    h: Optional[Callable] = None
    h_x: Optional[Callable] = None

    def __post_init__(self):
        if self.h is None:
            self.h = lambda x: x
            self.h_x = lambda x: np.ones_like(np.asarray(x, dtype=float))
        elif self.h_x is None:
            raise SpecError("a utility needs its derivative h_x")

    def functions(self, tree):
        return (_rate(tree, self.r), _kernel(tree, self.l1), _kernel(tree, self.l2),
                _kernel(tree, self.k1), _kernel(tree, self.k2))


def quadratic_utility(gamma):
    """h(x) = x - gamma x^2 / 2."""
    if gamma == 0:
        raise SpecError("the risk-aversion parameter must be nonzero")
    return (lambda x: x - 0.5 * gamma * x ** 2), (lambda x: 1.0 - gamma * x)


def simulate_wealth(tree, market, v=0.0):
    """Wealth process under portfolio ``v``."""
    rho, alpha, beta = (_lookup(tree, a) for a in market.arrays(tree))
    spec = ForwardSpec(
        phi=market.x0,
        b=lambda t, s, x, u: rho(s) * x + u * (alpha(s) - rho(s)),
        sigma=lambda t, s, x, u: u * beta(s),
        u=v,
    )
    return solve_forward(tree, spec)


def risk_generator(tree, risk, with_costs=False):
    """g = r(s) y + k1(t,s) zeta + k2(t,s), plus l1 x + l2 v when ``with_costs``."""
    r, l1, l2, k1, k2 = risk.functions(tree)
    if with_costs:
        def g(t, s, x, y, z, zeta, v):
            return r(s) * y + k1(t, s) * zeta + k2(t, s) + l1(t, s) * x + l2(t, s) * v
    else:
        def g(t, s, x, y, z, zeta, v):
            return r(s) * y + k1(t, s) * zeta + k2(t, s)
    return GeneratorSpec(
        g=g,
        g_y=lambda t, s, x, y, z, zeta, v: r(s),
        g_zeta=lambda t, s, x, y, z, zeta, v: k1(t, s),
        g_x=(lambda t, s, x, y, z, zeta, v: l1(t, s)) if with_costs else None,
        g_v=(lambda t, s, x, y, z, zeta, v: l2(t, s)) if with_costs else None,
        name="finance_risk",
    )


def position_family(tree, risk, X, v, diagonal=True):
    """psi_i = h(X_N) + sum_{j>=i} [l1(t_i,t_j) X_j + l2(t_i,t_j) v_j] h."""
    N, h, t = tree.N, tree.h, tree.t
    _, l1, l2, _, _ = risk.functions(tree)
    v = as_process(tree, v, "portfolio")
    psi = np.repeat(np.asarray(risk.h(X[N]), dtype=float)[None, :], N + 1, axis=0)
    for j in range(N):
        n = j + 1 if diagonal else j
        if n:
            tt = t[:n, None]
            psi[:n] += h * (l1(tt, t[j]) * X[j] + l2(tt, t[j]) * v[j])
    return psi


def risk_value(tree, risk, market, v=0.0, cfg=None, diagonal=True, method="picard"):
    """Risk Y(0) of portfolio ``v``; returns ``(Y0, MSolution, X)``."""
    X = simulate_wealth(tree, market, v)
    psi = position_family(tree, risk, X, v, diagonal)
    spec = BsvieSpec(psi=-psi, generator=risk_generator(tree, risk), diagonal=diagonal)
    if method == "picard":
        sol, _ = picard_solve(tree, spec, cfg or PicardConfig(tol=1e-12, max_iter=200))
    elif method == "causal":
        sol = solve_bsvie_direct(tree, spec)
    else:
        raise SpecError(f"unknown method {method!r}")
    return float(tree.expectation(sol.Y[0])), sol, X


def linear_utility_minimal_risk(market, risk, T, wealth_sign=-1.0):
    """wealth_sign * e^{int_0^T (rho + r)} x + int_0^T e^{int_0^s r} k2(0, s) ds.

    Deterministic coefficients, k1 = 0, k2 independent of t. ``wealth_sign``
    -1 is the value of the risk equation above; +1 gives the variant with
    the wealth term counted positively.
    """
    rho, r = _scalar_fn(market.rho), _scalar_fn(risk.r)
    k2 = risk.k2 if callable(risk.k2) else (lambda t, s, c=float(risk.k2): c)
    growth = np.exp(_integral(lambda s: rho(s) + r(s), 0.0, T))
    carry = _integral(lambda s: np.exp(_integral(r, 0.0, s)) * k2(0.0, s), 0.0, T)
    return wealth_sign * growth * market.x0 + carry


def random_rate_minimal_risk(x0, rho, r0, c, k2, T, wealth_sign=-1.0):
    """Same quantity for r(s) = r0 + c W(s), constant rho and k2.

    Uses E exp(c int_0^s W) = exp(c^2 s^3 / 6).
    """
    growth = np.exp((rho + r0) * T + c * c * T ** 3 / 6.0)
    carry = quad(lambda s: np.exp(r0 * s + c * c * s ** 3 / 6.0) * k2, 0.0, T)[0]
    return wealth_sign * growth * x0 + carry


# -- risk measure as a map of positions ------------------------------------

def dynamic_risk(tree, risk, Psi, diagonal=True):
    """rho(t_i; Psi) = Y_i for the risk equation with free term -Psi."""
    drift = generator_drift(tree, risk_generator(tree, risk))
    sol = solve_causal(tree, -as_process(tree, Psi, "position"), drift, diagonal)
    return sol.Y


def sample_positions(tree, n, rng):
    """Random positions Psi(t, path) built from W(t), W(T) and t."""
    t = tree.t[:, None]
    W, WT = tree.W, tree.W[-1][None, :]
    out = []
    for _ in range(n):
        a = rng.normal(size=6)
        out.append(a[0] + a[1] * t + a[2] * WT + a[3] * np.sin(W) + a[4] * np.maximum(WT, 0.0)
                   + a[5] * np.cos(WT - W))
    return out


def risk_measure_axioms(tree, risk, positions=None, level=None, n_samples=5, seed=0, diagonal=True):
    """Worst violation of each axiom of a dynamic coherent risk measure.

    Violations are measured on outer times t_i >= t_level and reported as
    nonnegative numbers (zero when the axiom holds exactly):

    * past_independence: max |rho(Psi) - rho(Psi')| when Psi' = Psi on [t, T];
    * monotonicity: max (rho(Psibar) - rho(Psi))^+ when Psibar >= Psi on [t, T];
    * translativity: max |rho(Psi + c) - rho(Psi) + c e^{int_t^T r}|, c = 1
      (deterministic r only);
    * homogeneity: max |rho(lam Psi) - lam rho(Psi)|, lam in {0.5, 2.5};
    * subadditivity: max (rho(Psi1 + Psi2) - rho(Psi1) - rho(Psi2))^+.
    """
    rng = np.random.default_rng(seed)
    N = tree.N
    k = N // 2 if level is None else level
    positions = positions if positions is not None else sample_positions(tree, n_samples, rng)
    rows = slice(k, N + 1)
    rho = lambda P: dynamic_risk(tree, risk, P, diagonal)[rows]  # noqa: E731
    out = dict.fromkeys(("past_independence", "monotonicity", "translativity", "homogeneity", "subadditivity"), 0.0)
    deterministic_r = not isinstance(risk.r, np.ndarray) or np.ndim(risk.r) <= 1
    growth = None
    if deterministic_r:
        r = _scalar_fn(risk.r) if not isinstance(risk.r, np.ndarray) else None
        if r is not None:
            growth = np.array([np.exp(_integral(r, ti, tree.T)) for ti in tree.t])[rows, None]
    for i, P in enumerate(positions):
        base = rho(P)
        noise = np.zeros_like(P)
        noise[:k] = rng.normal(size=(k, P.shape[1]))
        out["past_independence"] = max(out["past_independence"], float(np.max(np.abs(rho(P + noise) - base))))
        bump = noise.copy()
        bump[k:] = np.abs(rng.normal(size=(N + 1 - k, P.shape[1])))
        out["monotonicity"] = max(out["monotonicity"], float(np.max(rho(P + bump) - base, initial=0.0)))
        if growth is not None:
            out["translativity"] = max(out["translativity"], float(np.max(np.abs(rho(P + 1.0) - base + growth))))
        for lam in (0.5, 2.5):
            out["homogeneity"] = max(out["homogeneity"], float(np.max(np.abs(rho(lam * P) - lam * base))))
        other = positions[(i + 1) % len(positions)]
        gap = rho(P + other) - base - rho(other)
        out["subadditivity"] = max(out["subadditivity"], float(np.max(gap, initial=0.0)))
    if growth is None:
        out["translativity"] = float("nan")
    return out


# -- linear equation alpha1 E_t xi + beta1 theta = zeta ----------------------

def girsanov_exponent(tree, theta):
    """A_i = sum_{k<i} theta_k dW_k + 0.5 sum_{k<i} theta_k^2 h (A_0 = 0)."""
    theta = as_process(tree, theta, "theta")[: tree.N]
    A = np.zeros((tree.N + 1, tree.n_paths))
    A[1:] = np.cumsum(theta * tree.dW + 0.5 * theta ** 2 * tree.h, axis=0)
    return A


def girsanov_weight(tree, market):
    """Exponent A(t) built from the market price of risk."""
    return girsanov_exponent(tree, market.theta(tree))


def solve_lemma51(tree, alpha1, beta1, zeta, Exi, eps=1e-12):
    """Solve alpha1 E_t xi + beta1 theta = zeta for (xi, theta) with E xi = ``Exi``.

    P_{k+1} = P_k + (zeta_k - alpha1_k P_k) / beta1_k dW_k, P_0 = Exi,
    xi = P_N, theta the martingale density of xi. Returns ``(xi, theta)``
    with ``xi`` of shape (L,) and ``theta`` of shape (N, L).
    """
    N = tree.N
    a = as_process(tree, alpha1, "alpha1")
    b = as_process(tree, beta1, "beta1")
    z = as_process(tree, zeta, "zeta")
    if np.any(np.abs(b[:N]) < eps):
        raise SpecError("beta1 is not invertible")
    P = np.full(tree.n_paths, float(Exi))
    for k in range(N):
        P = P + (z[k] - a[k] * P) / b[k] * tree.dW[k]
    _, theta = terminal_density(tree, P)
    return P, theta


def lemma51_residual(tree, alpha1, beta1, zeta, xi, theta):
    """max |alpha1 E_k xi + beta1 theta_k - zeta_k| over nodes k < N."""
    N = tree.N
    E, _ = terminal_density(tree, xi)
    a = as_process(tree, alpha1)[:N]
    b = as_process(tree, beta1)[:N]
    z = as_process(tree, zeta)[:N]
    return float(np.max(np.abs(a * E[:N] + b * theta - z)))


# -- the control problem and its adjoints ------------------------------------

def finance_problem(tree, risk, market):
    """The risk-minimisation problem written in the general control framework.

    Running cost l = [r(s) + E k1(0,s)] y - l1(0,s) x - l2(0,s) v + k2(0,s),
    terminal cost -h(x), generator r y + k1 zeta + k2 + l1 x + l2 v. Only the
    adjoint system is meaningful here; the state BSVIE has free term zero.
    """
    rho, alpha, beta = (_lookup(tree, a) for a in market.arrays(tree))
    r, l1, l2, k1, k2 = risk.functions(tree)
    t = tree.t
    Ek1 = np.array([float(np.mean(k1(0.0, s))) for s in t])
    ek1 = _lookup(tree, np.repeat(Ek1[:, None], tree.n_paths, axis=1))
    coeffs = CoefficientSpec(
        b=lambda tt, s, x, v: rho(s) * x + v * (alpha(s) - rho(s)),
        b_x=lambda tt, s, x, v: rho(s),
        b_v=lambda tt, s, x, v: alpha(s) - rho(s),
        sigma=lambda tt, s, x, v: v * beta(s),
        sigma_v=lambda tt, s, x, v: beta(s),
        l=lambda s, x, y, v: (r(s) + ek1(s)) * y - l1(0.0, s) * x - l2(0.0, s) * v + k2(0.0, s),
        l_x=lambda s, x, y, v: -l1(0.0, s),
        l_y=lambda s, x, y, v: r(s) + ek1(s),
        l_v=lambda s, x, y, v: -l2(0.0, s),
        h=lambda x: -risk.h(x),
        h_x=lambda x: -risk.h_x(x),
    )
    return ControlProblem(tree=tree, phi=market.x0, coeffs=coeffs, psi=0.0,
                          generator=risk_generator(tree, risk, with_costs=True))


def finance_adjoint(tree, risk, market, v=0.0):
    """Solve the state and adjoint system of the finance problem at ``v``."""
    prob = finance_problem(tree, risk, market)
    st = solve_state(prob, as_process(tree, v, "portfolio"))
    return prob, st, solve_adjoint(prob, st)


def assemble_M(tree, risk, market, adj):
    """M_j = sum_{k<j} l2(t_k,t_j) P_k h + beta_j E_j sum_{i>j} R(i,j) h
    + (alpha_j - rho_j) E_j sum_{i>j} Q_i h, for j < N."""
    N, h, t = tree.N, tree.h, tree.t
    rho, alpha, beta = market.arrays(tree)
    _, _, l2, _, _ = risk.functions(tree)
    P = adj.P_with_mass(h)
    M = np.zeros((N, tree.n_paths))
    for k in range(N - 1):
        M[k + 1:] += h * np.broadcast_to(l2(t[k], t[k + 1:N, None]), (N - 1 - k, tree.n_paths)) * P[k]
    for j in range(N - 1):
        sR = h * adj.R[j + 1:N, j].sum(axis=0)
        sQ = h * adj.Q[j + 1:N].sum(axis=0)
        M[j] += beta[j] * tree.project(sR, j) + (alpha[j] - rho[j]) * tree.project(sQ, j)
    return M


def utility_density(tree, risk, X):
    """(E_k h_x(X_N), pi) for the utility itself."""
    return terminal_density(tree, risk.h_x(X[tree.N]))


def stationarity_residual(tree, risk, market, X, M):
    """(alpha - rho) E_t h_x(X_N) + beta pi + M at every node t < N."""
    N = tree.N
    rho, alpha, beta = market.arrays(tree)
    Eh, pi = utility_density(tree, risk, X)
    return (alpha[:N] - rho[:N]) * Eh[:N] + beta[:N] * pi + M


def hamiltonian_slope(prob, adj, st):
    """Coefficient of v in the maximisation-form Hamiltonian, per node."""
    return -hamiltonian_coefficient(prob, adj, st)


# -- closed forms -------------------------------------------------------------

def _check_case(tree, case, risk, market, tol=1e-12):
    if case not in (1, 2, 3):
        raise SpecError(f"unknown case {case!r}")
    t = tree.t
    r, l1, l2, k1, _ = risk.functions(tree)
    ii, jj = np.meshgrid(np.arange(len(t)), np.arange(len(t)), indexing="ij")
    ti, tj = t[ii], t[jj]
    for name, f in (("l1", l1), ("l2", l2)):
        val = np.broadcast_to(np.asarray(f(ti, tj), dtype=float), ti.shape)
        if not np.allclose(val, val[:1], atol=tol):
            raise SpecError(f"{name}(t, s) must not depend on t")
    kk = np.broadcast_to(np.asarray(k1(ti, tj), dtype=float), ti.shape)
    rr = np.broadcast_to(np.asarray(r(tj), dtype=float), ti.shape)
    if not np.allclose(kk, rr, atol=tol):
        raise SpecError("closed forms need k1(t, s) = r(s)")
    if callable(risk.r) is False and np.ndim(risk.r) > 0:
        raise SpecError("closed forms need a deterministic r")
    rho = market.arrays(tree)[0][:, 0]
    if case == 1 and np.any(np.abs(rho) > tol):
        raise SpecError("this case needs rho = 0")
    if case == 2 and np.any(np.abs(np.asarray(r(t), dtype=float)) > tol):
        raise SpecError("this case needs r = 0")


@dataclass
class ClosedForms:
    """Closed-form P, Q, R (R valid for s < t only), with Q', R' and the density pi."""

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Q1: np.ndarray
    R1: np.ndarray
    Eh: np.ndarray
    pi: np.ndarray


def closed_form_adjoints(case, tree, risk, market, X):
    """Evaluate the closed-form adjoints along the wealth ``X``.

    Stochastic exponentials use exact deterministic integrals and the
    literal sum of r(t_k) dW_k; Lebesgue integrals of random integrands are
    left Riemann sums. Case 3 contains the other two as special cases, so
    one evaluation serves all three after the case preconditions are checked.
    """
    _check_case(tree, case, risk, market)
    N, h, t, L = tree.N, tree.h, tree.t, tree.n_paths
    r = _scalar_fn(risk.r) if callable(risk.r) or np.ndim(risk.r) == 0 else None
    l1 = _kernel(tree, risk.l1)
    l1t = np.array([float(np.mean(l1(0.0, s))) for s in t])
    rho_fn = _scalar_fn(market.rho)
    rho = np.array([float(rho_fn(s)) for s in t])
    rt = np.array([float(r(s)) for s in t])
    cum_r = _cumulative(r, t)
    cum_r2 = _cumulative(lambda s: r(s) ** 2, t)
    cum_rho = _cumulative(rho_fn, t)
    stoch = np.zeros((N + 1, L))
    stoch[1:] = np.cumsum(rt[:N, None] * tree.dW, axis=0)
    mart = np.exp(-0.5 * cum_r2[:, None] + stoch)
    P = 2.0 * rt[:, None] * np.exp(cum_r)[:, None] * mart
    intP = np.zeros((N + 1, L))
    intP[1:] = np.cumsum(P[:N] * h, axis=0)
    Q1 = l1t[:, None] * (-1.0 + intP)
    R1 = np.zeros((N + 1, N, L))
    er = np.exp(cum_r)
    for i in range(1, N + 1):
        R1[i, :i] = 2.0 * l1t[i] * (er[i] - er[:i, None]) * rt[:i, None] * mart[:i]
    Hx = risk.h_x(X[N])
    Eh, pi = terminal_density(tree, Hx)
    grow_T = np.exp(cum_rho[N] - cum_rho)
    Q = Q1 - (rho * grow_T)[:, None] * Eh
    R = R1.copy()
    for i in range(1, N + 1):
        R[i, :i] -= rho[i] * grow_T[i] * pi[:i]
    for i in range(N):
        w = np.exp(cum_rho[i:N] - cum_rho[i])[:, None]
        Q[i] += rho[i] * tree.project(h * (w * Q1[i:N]).sum(axis=0), i)
        if i:
            R[i, :i] += rho[i] * h * np.einsum("k,kjl->jl", w[:, 0], R1[i:N, :i])
    return ClosedForms(P=P, Q=Q, R=R, Q1=Q1, R1=R1, Eh=Eh, pi=pi)


def closed_form_M(case, tree, risk, market, X):
    """Closed-form M(t) (displayed combination), for t < N."""
    cf = closed_form_adjoints(case, tree, risk, market, X)
    N, h, t, L = tree.N, tree.h, tree.t, tree.n_paths
    rho_fn = _scalar_fn(market.rho)
    rho = np.array([float(rho_fn(s)) for s in t])
    cum_rho = _cumulative(rho_fn, t)
    _, alpha, beta = market.arrays(tree)
    l2 = _kernel(tree, risk.l2)
    l2t = np.array([float(np.mean(l2(0.0, s))) for s in t])
    gap = (1.0 - np.exp(cum_rho[N] - cum_rho))[:N, None]
    M = ((alpha[:N] - rho[:N, None]) * cf.Eh[:N] + beta[:N] * cf.pi) * gap
    M += l2t[:N, None] * np.vstack([np.zeros((1, L)), np.cumsum(cf.P[: N - 1] * h, axis=0)])
    # inner(s) = Q'(s) + rho(s) sum_{v>=s} e^{int_s^v rho} Q'(v) h, likewise for R'
    innerQ = np.empty((N, L))
    innerR = np.empty((N, N, L))
    for k in range(N):
        w = np.exp(cum_rho[k:N] - cum_rho[k])
        innerQ[k] = cf.Q1[k] + rho[k] * h * np.einsum("m,ml->l", w, cf.Q1[k:N])
        innerR[k] = cf.R1[k] + rho[k] * h * np.einsum("m,mjl->jl", w, cf.R1[k:N])
    for j in range(N):
        sQ = h * innerQ[j:N].sum(axis=0)
        sR = h * innerR[j:N, j].sum(axis=0)
        M[j] += (alpha[j] - rho[j]) * tree.project(sQ, j) + beta[j] * tree.project(sR, j)
    return M


def _common_rows(tree, coarse):
    if tree.N % coarse:
        raise SpecError(f"N = {tree.N} is not a multiple of {coarse}")
    return np.arange(0, tree.N, tree.N // coarse)


def process_error(tree, A, B, coarse=4):
    """RMS over leaves and the shared times k T / coarse (k < coarse) of A - B."""
    rows = _common_rows(tree, coarse)
    return float(np.sqrt(np.mean((np.asarray(A)[rows] - np.asarray(B)[rows]) ** 2)))


def adjoint_errors(tree, adj, cf, coarse=4):
    """Differences (P, Q, R) between solver and closed form.

    Errors are RMS over leaves at the times shared by every grid that
    refines ``coarse`` steps, so errors from different N compare the same
    points. R is compared at pairs s < t of those times.
    """
    rows = _common_rows(tree, coarse)
    eP = process_error(tree, adj.P, cf.P, coarse)
    eQ = process_error(tree, adj.Q, cf.Q, coarse)
    pairs = [(i, j) for i in rows for j in rows if j < i]
    dR = np.array([adj.R[i, j] - cf.R[i, j] for i, j in pairs])
    eR = float(np.sqrt(np.mean(dR ** 2)))
    return eP, eQ, eR


# -- optimal portfolios -------------------------------------------------------

@dataclass
class PortfolioResult:
    u: Optional[np.ndarray]
    X: Optional[np.ndarray]
    value: Optional[float]
    feasible: bool
    residual: float
    iterations: int = 0
    damping: float = 0.0


def characterization_residual(tree, market, hx_N):
    """RMS over leaves of h_x(X_N) - e^{-A(T)} E h_x(X_N)."""
    A = girsanov_weight(tree, market)[tree.N]
    return float(np.sqrt(np.mean((hx_N - np.exp(-A) * np.mean(hx_N)) ** 2)))


def optimal_portfolio_linear(tree, market, risk, cfg=None, tol=1e-12):
    """Optimum for linear utility: u = 0 when alpha = rho, otherwise infeasible."""
    rho, alpha, _ = market.arrays(tree)
    if risk.h(2.0) - 2.0 * risk.h(1.0) + risk.h(0.0) != 0.0:
        raise SpecError("the utility must be linear")
    if np.max(np.abs(alpha - rho)) <= tol:
        u = np.zeros((tree.N + 1, tree.n_paths))
        Y0, _, X = risk_value(tree, risk, market, u, cfg)
        return PortfolioResult(u=u, X=X, value=Y0, feasible=True, residual=0.0)
    ones = np.ones(tree.n_paths) * float(risk.h_x(1.0))
    return PortfolioResult(u=None, X=None, value=None, feasible=False,
                           residual=characterization_residual(tree, market, ones))


def meanvariance_gain(tree, market):
    """kappa_k with u_k = kappa_k (1/gamma - E_k X_N) at the optimum.

    kappa_k = (theta_k / beta_k) prod_{m>k} (1 + theta_m^2 h) / prod_{m>k} (1 + rho_m h),
    the exact optimum of the tree problem; deterministic coefficients only.
    """
    N, h = tree.N, tree.h
    rho, alpha, beta = market.arrays(tree)
    if not (_is_deterministic(alpha) and _is_deterministic(beta)):
        raise SpecError("the feedback form needs deterministic market coefficients")
    rho, alpha, beta = rho[:, 0], alpha[:, 0], beta[:, 0]
    theta = (alpha - rho) / beta
    kappa = np.zeros(N + 1)
    for k in range(N):
        G = np.prod(1.0 + theta[k + 1:N] ** 2 * h)
        D = np.prod(1.0 + rho[k + 1:N] * h)
        kappa[k] = theta[k] / beta[k] * G / D
    return kappa


def optimal_portfolio_meanvariance(tree, market, gamma, damping=0.5, tol=1e-10, max_iter=2000):
    """Optimal portfolio for h(x) = x - gamma x^2 / 2 by damped fixed point.

    Alternates u = kappa (1/gamma - E_k X_N^u) with the wealth simulation
    until the control moves by less than ``tol`` in sup norm.
    """
    if gamma == 0:
        raise SpecError("the risk-aversion parameter must be nonzero")
    N = tree.N
    kappa = meanvariance_gain(tree, market)[:, None]
    u = np.zeros((N + 1, tree.n_paths))
    for it in range(1, max_iter + 1):
        X = simulate_wealth(tree, market, u)
        EX, _ = terminal_density(tree, X[N])
        target = kappa * (1.0 / gamma - EX)
        target[N] = 0.0
        du = float(np.max(np.abs(target - u)))
        if du < tol:
            hx = 1.0 - gamma * X[N]
            return PortfolioResult(u=u, X=X, value=-float(np.mean(X[N] - 0.5 * gamma * X[N] ** 2)),
                                   feasible=True, residual=characterization_residual(tree, market, hx),
                                   iterations=it, damping=damping)
        if not np.isfinite(du):
            break
        u = (1.0 - damping) * u + damping * target
    raise ConvergenceError(f"mean-variance fixed point did not converge (damping {damping:g})")


def meanvariance_terminal_wealth(tree, market, gamma):
    """Optimal terminal wealth (1 - c Xi) / gamma from the budget constraint.

    Xi = prod (1 - theta_k dW_k) is the state-price density of the tree and
    c = (1 - gamma x D) / E Xi^2 with D = prod (1 + rho_k h).
    """
    N, h = tree.N, tree.h
    rho, _, _ = market.arrays(tree)
    theta = market.theta(tree)[:N]
    Xi = np.prod(1.0 - theta * tree.dW, axis=0)
    D = np.prod(1.0 + rho[:N, 0] * h)
    c = (1.0 - gamma * market.x0 * D) / float(np.mean(Xi ** 2))
    return (1.0 - c * Xi) / gamma


def optimality_certificate(tree, market, hx_N, portfolios):
    """E[h_x(X^u_N) X^v_N] for each portfolio v."""
    return [float(np.mean(hx_N * simulate_wealth(tree, market, v)[tree.N])) for v in portfolios]


def martingale_certificate(tree, market, portfolios):
    """E[e^{-A(T)} X^v_N] for each v, against x prod(1 + rho h)."""
    A = girsanov_weight(tree, market)[tree.N]
    rho = market.arrays(tree)[0][: tree.N, 0]
    ref = market.x0 * float(np.prod(1.0 + rho * tree.h))
    return [float(np.mean(np.exp(-A) * simulate_wealth(tree, market, v)[tree.N])) for v in portfolios], ref


def random_portfolios(tree, n, rng, scale=1.0):
    """Random adapted portfolios built from W and t."""
    t = tree.t[:, None]
    out = []
    for _ in range(n):
        a = rng.normal(size=4) * scale
        v = a[0] + a[1] * t + a[2] * np.tanh(tree.W) + a[3] * np.cos(tree.W)
        v[tree.N] = 0.0
        out.append(v)
    return out
