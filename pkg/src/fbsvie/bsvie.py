"""Adapted M-solutions of backward stochastic Volterra integral equations.

Discrete equation for every outer index i:

    Y_i = psi_i + sum_{j in D_i} g(t_i, t_j, x_j, Y_j, Z(i,j), Z(j,i), v_j) h
              - sum_{j=i}^{N-1} Z(i,j) dW_j

with D_i = {i, ..., N-1} (``diagonal=True``, left-point rule) or
D_i = {i+1, ..., N-1} (``diagonal=False``). For j < i, Z(i, j) comes from the
martingale representation of Y_i (the M-condition).

One Picard step freezes Y_j and the reflected values Z(j, i) at the current
iterate and solves, for each i, the backward recursion

    V_N = psi_i,  (m, z) = represent(V_{j+1}, j),  Z(i,j) = z,  V_j = m + g(...) h

so Y_i = V_i. All outer indices are advanced together inside one loop over j.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .errors import ConvergenceError, SpecError
from .processes import (
    GeneratorSpec,
    MSolution,
    as_process,
    check_finite,
    m_completion,
    time_energies,
)

BETA_LADDER = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)


@dataclass
class PicardConfig:
    """Picard settings. ``beta=None`` selects the weight automatically."""

    beta: Optional[float] = None
    tol: float = 1e-10
    max_iter: int = 100

    def __post_init__(self):
        if not self.tol > 0:
            raise SpecError("tolerance must be positive")
        if self.max_iter < 1:
            raise SpecError("max_iter must be at least 1")
        if self.beta is not None and self.beta < 0:
            raise SpecError("weight must be nonnegative")


@dataclass
class PicardReport:
    """Iteration history. Deltas can be re-weighted for any beta afterwards."""

    beta: float
    converged: bool = False
    contraction_found: bool = True
    energies: List[np.ndarray] = field(default_factory=list)
    t: Optional[np.ndarray] = None
    h: float = 1.0

    @property
    def iterations(self):
        return len(self.energies)

    def deltas_for(self, beta):
        w = self.h * np.exp(beta * self.t[:-1])
        return [float(np.sqrt(np.sum(w * e))) for e in self.energies]

    @property
    def deltas(self):
        return self.deltas_for(self.beta)

    def ratios_for(self, beta, floor=1e-13):
        """Successive delta ratios, skipping steps that reach round-off."""
        d = self.deltas_for(beta)
        scale = max(d) if d else 0.0
        out = []
        for a, b in zip(d[:-1], d[1:]):
            if a <= floor * max(scale, 1.0) or b <= floor * max(scale, 1.0):
                break
            out.append(b / a)
        return out

    @property
    def ratios(self):
        return self.ratios_for(self.beta)

    def mean_ratio(self, beta=None):
        """Geometric mean of the contraction ratios (0 if none recorded)."""
        r = self.ratios_for(self.beta if beta is None else beta)
        return float(np.exp(np.mean(np.log(r)))) if r else 0.0


@dataclass
class BsvieSpec:
    """Terminal family, generator, frozen forward inputs and quadrature rule."""

    psi: object
    generator: GeneratorSpec
    x: object = None
    v: object = None
    diagonal: bool = True


def backward_sweep(tree, psi, drift, diagonal=True, iterate=None):
    """One Picard step: solve the backward recursion with Y and Z(s,t) frozen.

    ``drift(j, rows, y, z, zeta)`` returns the generator values for the outer
    rows in the slice ``rows`` at inner step j, where ``y`` is the frozen Y_j, ``z`` holds
    Z(t_i, t_j) from the current sweep and ``zeta`` the frozen Z(t_j, t_i).
    Z(i, j) for j < i is filled by M-completion.
    """
    N, h = tree.N, tree.h
    it = iterate or MSolution.zeros(tree)
    V = as_process(tree, psi, "terminal family")
    check_finite(V, "terminal family", N, tree)
    Z = np.zeros((N + 1, N, V.shape[-1]))
    for j in range(N - 1, -1, -1):
        m, z = tree.represent(V[: j + 1], j)
        Z[: j + 1, j] = z
        V[: j + 1] = m
        n = j + 1 if diagonal else j
        if drift is not None and n > 0:
            d = drift(j, slice(0, n), it.Y[j], z[:n], it.Z[j, :n])
            check_finite(d, "generator", j, tree)
            V[:n] += h * d
    Z += m_completion(tree, V)
    return MSolution(V, Z)


def solve_causal(tree, psi, drift, diagonal=True, tol=1e-15, max_inner=200):
    """Solve the backward equation directly in a single backward sweep.

    At inner step j the row i = j is complete once its own drift term is
    resolved, which only involves Y_j (a scalar fixed point per node, solved
    by iteration when ``diagonal``). The completion of Y_j then supplies
    Z(t_j, t_i) for every earlier row, so no outer iteration is needed. The
    result is the fixed point of the Picard map.
    """
    N, h = tree.N, tree.h
    V = as_process(tree, psi, "terminal family")
    check_finite(V, "terminal family", N, tree)
    L = V.shape[-1]
    Z = np.zeros((N + 1, N, L))
    Z[N] = _complete_row(tree, V[N], N)
    for j in range(N - 1, -1, -1):
        m, z = tree.represent(V[: j + 1], j)
        Z[: j + 1, j] = z
        V[: j + 1] = m
        if drift is None:
            Z[j, :j] = _complete_row(tree, V[j], j)
            continue
        if diagonal:
            base = m[j].copy()
            y = base.copy()
            for _ in range(max_inner):
                y_new = base + h * drift(j, slice(j, j + 1), y, z[j:j + 1], z[j:j + 1])[0]
                done = np.max(np.abs(y_new - y)) <= tol * max(1.0, np.max(np.abs(y_new)))
                y = y_new
                if done:
                    break
            else:
                raise ConvergenceError(f"implicit step at level {j} did not converge")
            V[j] = y
        Z[j, :j] = _complete_row(tree, V[j], j)
        if j:
            d = drift(j, slice(0, j), V[j], z[:j], Z[j, :j])
            check_finite(d, "generator", j, tree)
            V[:j] += h * d
    return MSolution(V, Z)


def _complete_row(tree, y, i):
    """Z(t_i, t_j) for j < i from the martingale representation of y."""
    out = np.zeros((i, y.shape[-1]))
    cur = y
    for j in range(i - 1, -1, -1):
        cur, out[j] = tree.represent(cur, j)
    return out


def _frozen(tree, values):
    if values is None:
        return np.zeros((tree.N + 1, tree.n_paths))
    return as_process(tree, values)


def generator_drift(tree, gen, x=None, v=None):
    """Drift callback evaluating ``gen`` with frozen forward inputs x, v."""
    x = _frozen(tree, x)
    v = _frozen(tree, v)
    t = tree.t

    def drift(j, rows, y, z, zeta):
        val = gen.g(t[rows, None], t[j], x[j], y, z, zeta, v[j])
        return np.broadcast_to(np.asarray(val, dtype=float), z.shape)

    return drift


def solve_simple_bsvie(tree, psi, h_gen=None, diagonal=True):
    """Solve Y(t) = psi(t) + sum h_gen(t, s, Z(t,s)) h - sum Z(t,s) dW(s)."""
    if h_gen is None:
        return backward_sweep(tree, psi, None, diagonal)
    t = tree.t

    def drift(j, rows, y, z, zeta):
        return np.broadcast_to(np.asarray(h_gen(t[rows, None], t[j], z), dtype=float), z.shape)

    return backward_sweep(tree, psi, drift, diagonal)


def picard_step(tree, psi, gen, iterate, x=None, v=None, diagonal=True):
    """Apply the Picard map once to the iterate (an :class:`MSolution`)."""
    return backward_sweep(tree, psi, generator_drift(tree, gen, x, v), diagonal, iterate)


def picard_iterate(tree, psi, drift, diagonal=True, cfg=None, start=None):
    """Generic Picard loop from ``start`` (default (0, 0))."""
    cfg = cfg or PicardConfig()
    auto = cfg.beta is None
    report = PicardReport(beta=0.0 if auto else float(cfg.beta), t=tree.t, h=tree.h)
    it = MSolution(start.Y.copy(), start.Z.copy()) if start is not None else MSolution.zeros(tree)
    for k in range(cfg.max_iter):
        new = backward_sweep(tree, psi, drift, diagonal, it)
        it.Y -= new.Y
        it.Z -= new.Z
        report.energies.append(time_energies(tree, it.Y, it.Z))
        if auto and report.iterations == 3:
            report.beta, report.contraction_found = _choose_beta(report)
        w = tree.h * np.exp(report.beta * tree.t[:-1])
        delta = float(np.sqrt(np.sum(w * report.energies[-1])))
        size = float(np.sqrt(np.sum(w * time_energies(tree, new.Y, new.Z))))
        it = new
        if delta <= cfg.tol * max(1.0, size):
            report.converged = True
            break
    return it, report


def _choose_beta(report):
    """Smallest beta on the ladder for which the first three deltas decrease."""
    for beta in BETA_LADDER:
        d = report.deltas_for(beta)
        if d[1] < d[0] and (d[2] < d[1] or d[2] == 0.0):
            return beta, True
        if d[1] == 0.0:
            return beta, True
    return BETA_LADDER[-1], False


def picard_solve(tree, spec, cfg=None):
    """Solve the BSVIE in ``spec`` by Picard iteration from (0, 0)."""
    drift = generator_drift(tree, spec.generator, spec.x, spec.v)
    return picard_iterate(tree, spec.psi, drift, spec.diagonal, cfg)


def solve_bsvie_direct(tree, spec):
    """Solve the BSVIE in ``spec`` by the single causal sweep."""
    return solve_causal(tree, spec.psi, generator_drift(tree, spec.generator, spec.x, spec.v), spec.diagonal)


def bsvie_residual(tree, spec, sol):
    """Largest pathwise residual of the discrete BSVIE at ``sol``."""
    N, h, t, L = tree.N, tree.h, tree.t, tree.n_paths
    psi = as_process(tree, spec.psi)
    x, v = _frozen(tree, spec.x), _frozen(tree, spec.v)
    Y, Z = sol.Y, sol.Z
    rhs = psi.copy()
    for j in range(N):
        n = j + 1 if spec.diagonal else j
        if n:
            g = spec.generator.g(t[:n, None], t[j], x[j], Y[j], Z[:n, j], Z[j, :n], v[j])
            rhs[:n] += h * np.broadcast_to(g, (n, L))
        rhs[: j + 1] -= Z[: j + 1, j] * tree.dW[j]
    return float(np.max(np.abs(Y - rhs)))


def stability_gap(tree, spec1, spec2, cfg=None):
    """Both sides of the stability estimate, per outer time t_i (i < N).

    lhs_i = E|Y_i - Ybar_i|^2 + E sum_{j>=i} h |Z(i,j) - Zbar(i,j)|^2
    rhs_i = E|psi_i - psibar_i|^2 + E (sum_{j in D_i} |g - gbar| h)^2

    with both generators evaluated along the first solution. Returns
    ``(lhs, rhs, C)`` where C is the smallest constant with lhs <= C rhs.
    """
    s1, _ = picard_solve(tree, spec1, cfg)
    s2, _ = picard_solve(tree, spec2, cfg)
    N, h, t, L = tree.N, tree.h, tree.t, tree.n_paths
    dY, dZ = s1.Y - s2.Y, s1.Z - s2.Z
    lhs = np.array([np.mean(dY[i] ** 2) + h * np.mean(dZ[i, i:] ** 2, axis=-1).sum() for i in range(N)])
    dpsi = as_process(tree, spec1.psi) - as_process(tree, spec2.psi)
    x, v = _frozen(tree, spec1.x), _frozen(tree, spec1.v)
    acc = np.zeros((N + 1, L))
    for j in range(N):
        n = j + 1 if spec1.diagonal else j
        if n:
            args = (t[:n, None], t[j], x[j], s1.Y[j], s1.Z[:n, j], s1.Z[j, :n], v[j])
            acc[:n] += h * np.abs(np.broadcast_to(spec1.generator.g(*args) - spec2.generator.g(*args), (n, L)))
    rhs = np.mean(dpsi[:N] ** 2, axis=-1) + np.mean(acc[:N] ** 2, axis=-1)
    pos = rhs > 0
    C = float(np.max(lhs[pos] / rhs[pos])) if np.any(pos) else 0.0
    return lhs, rhs, C
