"""Explicit Euler solver for forward stochastic Volterra integral equations.

    X(t_i) = phi(t_i) + sum_{j<i} b(t_i, t_j, X_j, u_j) h + sum_{j<i} sigma(t_i, t_j, X_j, u_j) dW_j

Because the kernels only read X at strictly earlier levels, the scheme is a
direct recursion. Contributions of step j are pushed to every later outer
time at once, so each kernel call is vectorised over the outer index.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .processes import as_process, check_finite


@dataclass
class ForwardSpec:
    """Free term, kernels ``b(t, s, x, v)``, ``sigma(t, s, x, v)`` and control."""

    phi: object
    b: Optional[Callable] = None
    sigma: Optional[Callable] = None
    u: object = 0.0


def forward_volterra(tree, phi, step):
    """Run the forward recursion with a user step function.

    ``step(j, x_j)`` returns the pair ``(drift, diffusion)`` for outer rows
    j+1..N (either may be ``None``); the solver adds ``drift * h`` and
    ``diffusion * dW_j``.
    """
    N, h = tree.N, tree.h
    phi = as_process(tree, phi, "free term")
    X = np.empty_like(phi)
    acc = np.zeros_like(phi)
    X[0] = phi[0]
    check_finite(X[0], "free term", 0, tree)
    for j in range(N):
        drift, diff = step(j, X[j])
        if drift is not None:
            check_finite(drift, "drift kernel", j, tree)
            acc[j + 1:] += drift * h
        if diff is not None:
            check_finite(diff, "diffusion kernel", j, tree)
            acc[j + 1:] += diff * tree.dW[j]
        X[j + 1] = phi[j + 1] + acc[j + 1]
        check_finite(X[j + 1], "state", j + 1, tree)
    return X


def solve_forward(tree, spec):
    """Solve the controlled forward equation described by ``spec``."""
    u = as_process(tree, spec.u, "control")
    t = tree.t
    shape = lambda j: (tree.N - j, tree.n_paths)  # noqa: E731

    def step(j, xj):
        tt = t[j + 1:, None]
        d = None if spec.b is None else np.broadcast_to(spec.b(tt, t[j], xj, u[j]), shape(j))
        s = None if spec.sigma is None else np.broadcast_to(spec.sigma(tt, t[j], xj, u[j]), shape(j))
        return d, s

    return forward_volterra(tree, spec.phi, step)


def kernel_rows(tree, A, j):
    """Values A(t_i, t_j) for i = j+1..N.

    ``A`` is ``None`` (zero), a callable ``A(t, s)``, or an array indexed
    ``[i, j]`` with optional trailing leaf axis.
    """
    if A is None:
        return None
    if callable(A):
        return np.asarray(A(tree.t[j + 1:, None], tree.t[j]), dtype=float)
    A = np.asarray(A, dtype=float)
    rows = A[j + 1:, j]
    return rows if rows.ndim == 2 else rows[:, None]


def solve_linear_forward_svie(tree, A1, A2, phi):
    """Solve xi_i = phi_i + sum_{j<i} (A1(i,j) h + A2(i,j) dW_j) xi_j."""

    def step(j, xj):
        a1 = kernel_rows(tree, A1, j)
        a2 = kernel_rows(tree, A2, j)
        return (None if a1 is None else a1 * xj), (None if a2 is None else a2 * xj)

    return forward_volterra(tree, phi, step)
