"""Process containers, coefficient bundles and shared process algebra.

Array conventions (``L`` is the number of leaves or paths):

* adapted process: array ``(N+1, L)``, row ``i`` measurable at level ``i``;
* terminal family psi(t_i): array ``(N+1, L)`` with arbitrary leaf values;
* two-parameter process Z(t_i, t_j): array ``(N+1, N, L)``, entry ``[i, j]``
  measurable at level ``j``.

Coefficient callables are evaluated on whole arrays and must broadcast.
A generator is called as ``g(t, s, x, y, z, zeta, v)`` where ``z`` stands for
Z(t, s) and ``zeta`` for the reflected value Z(s, t). Kernels of forward
equations are called as ``b(t, s, x, v)`` with s < t.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InfeasibleControlError, NonFiniteError, SpecError


def as_process(tree, values, name="process"):
    """Return ``values`` as a float array of shape (N+1, L).

    Accepts a scalar, a per-time vector of length N+1, a full array, or a
    callable of the time grid.
    """
    if callable(values):
        values = values(tree.t)
    a = np.asarray(values, dtype=float)
    shape = (tree.N + 1, tree.n_paths)
    if a.ndim == 0:
        return np.full(shape, float(a))
    if a.ndim == 1 and a.shape[0] == tree.N + 1:
        return np.repeat(a[:, None], tree.n_paths, axis=1)
    if a.shape == shape:
        return a.copy()
    raise SpecError(f"{name}: cannot interpret array of shape {a.shape} as {shape}")


def evaluate(f, shape, *args):
    """Evaluate an optional coefficient, treating ``None`` as zero."""
    if f is None:
        return np.zeros(shape)
    return np.broadcast_to(np.asarray(f(*args), dtype=float), shape)


def check_finite(values, term, level, tree):
    """Raise :class:`NonFiniteError` naming the first offending node."""
    values = np.asarray(values)
    if np.all(np.isfinite(values)):
        return
    bad = np.argwhere(~np.isfinite(values))[0]
    leaf = int(bad[-1])
    node = leaf >> (tree.N - level) if getattr(tree, "exact", False) else leaf
    raise NonFiniteError(term, level, node)


def time_energies(tree, y, z):
    """Per-time terms E|y_i|^2 + E sum_j h z(i, j)^2 for i < N."""
    N = tree.N
    L = y.shape[-1]
    ey = np.einsum("ik,ik->i", y[:N], y[:N]) / L
    ez = np.einsum("ijk,ijk->i", z[:N], z[:N]) * (tree.h / L)
    return ey + ez


def weighted_norm(tree, y, z, beta):
    """Exponentially weighted H^2 norm of the pair (y, z).

    ``sqrt(sum_i h e^{beta t_i} (E|y_i|^2 + E sum_j h |z(i,j)|^2))``, sums
    over i < N.
    """
    if beta < 0:
        raise SpecError(f"weight must be nonnegative, got {beta}")
    e = time_energies(tree, np.asarray(y, dtype=float), np.asarray(z, dtype=float))
    return float(np.sqrt(np.sum(tree.h * np.exp(beta * tree.t[:-1]) * e)))


def m_completion(tree, Y):
    """Fill Z(t_i, t_j), j < i, from the martingale representation of Y(t_i).

    Entries with j >= i are zero in the returned array.
    """
    Y = np.asarray(Y, dtype=float)
    N = tree.N
    Z = np.zeros((N + 1, N, Y.shape[-1]))
    cur = Y.copy()
    for j in range(N - 1, -1, -1):
        m, z = tree.represent(cur[j + 1:], j)
        Z[j + 1:, j] = z
        cur[j + 1:] = m
    return Z


def m_condition_residual(tree, Y, Z):
    """Largest |Y_i - E Y_i - sum_{j<i} Z(i,j) dW_j| over all times and leaves."""
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    N = tree.N
    worst = 0.0
    for i in range(N + 1):
        recon = tree.expectation(Y[i]) + (Z[i, :i] * tree.dW[:i]).sum(axis=0)
        worst = max(worst, float(np.max(np.abs(Y[i] - recon))))
    return worst


@dataclass
class MSolution:
    """An adapted solution pair (Y, Z) of a backward Volterra equation."""

    Y: np.ndarray
    Z: np.ndarray

    @classmethod
    def zeros(cls, tree):
        return cls(np.zeros((tree.N + 1, tree.n_paths)), np.zeros((tree.N + 1, tree.N, tree.n_paths)))

    def m_residual(self, tree):
        return m_condition_residual(tree, self.Y, self.Z)


def _kernel(value):
    if value is None or callable(value):
        return value
    c = float(value)
    return lambda t, s: c


def _fd_check(name, f, df, args, index, step, tol):
    """Compare the analytic partial ``df`` with a central difference of ``f``."""
    up = list(args)
    dn = list(args)
    up[index] = args[index] + step
    dn[index] = args[index] - step
    fd = (np.asarray(f(*up), dtype=float) - np.asarray(f(*dn), dtype=float)) / (2 * step)
    an = np.zeros_like(fd) if df is None else np.asarray(df(*args), dtype=float)
    err = np.abs(an - fd)
    bound = tol * np.maximum(1.0, np.abs(an))
    if np.any(err > bound):
        k = int(np.argmax(err - bound))
        raise SpecError(
            f"derivative {name} disagrees with finite differences: analytic "
            f"{np.ravel(an)[k] if np.ndim(an) else float(an)}, numeric {np.ravel(fd)[k]}"
        )


@dataclass
class GeneratorSpec:
    """Generator g(t, s, x, y, z, zeta, v) of a backward Volterra equation.

    Partial derivatives left as ``None`` are taken to be identically zero.
    ``L1``, ``L2``, ``L3`` are optional Lipschitz bounds in y, z and zeta
    (constants or functions of (t, s)).
    """

    g: Callable
    g_x: Optional[Callable] = None
    g_y: Optional[Callable] = None
    g_z: Optional[Callable] = None
    g_zeta: Optional[Callable] = None
    g_v: Optional[Callable] = None
    L1: object = None
    L2: object = None
    L3: object = None
    name: str = "custom"

    def __call__(self, t, s, x, y, z, zeta, v):
        return self.g(t, s, x, y, z, zeta, v)

    @property
    def depends_on_z(self):
        return self.g_z is not None

    def check(self, rng=None, n_points=64, T=1.0, step=1e-5, tol=1e-6, times=None):
        """Finite-difference and Lipschitz spot-checks on random points.

        ``times`` optionally fixes the (t, s) pairs, which is needed for
        generators that look up path data by grid time.
        """
        rng = np.random.default_rng(0) if rng is None else rng
        if times is None:
            times = rng.uniform(0.0, T, size=(n_points, 2))
        names = ("g_x", "g_y", "g_z", "g_zeta", "g_v")
        for t, s in times:
            args = [t, s] + list(rng.standard_normal(5))
            for k, nm in enumerate(names):
                _fd_check(nm, self.g, getattr(self, nm), args, k + 2, step, tol)
            bounds = [_kernel(b) for b in (self.L1, self.L2, self.L3)]
            if any(b is not None for b in bounds):
                other = list(args)
                other[3:6] = list(np.asarray(args[3:6]) + rng.standard_normal(3))
                lhs = abs(float(self.g(*args)) - float(self.g(*other)))
                rhs = 0.0
                for b, a0, a1 in zip(bounds, args[3:6], other[3:6]):
                    rhs += np.inf if b is None else float(b(t, s)) * abs(a0 - a1)
                if lhs > rhs + 1e-12:
                    raise SpecError(f"Lipschitz bound violated for generator {self.name}")
        return True


@dataclass
class CoefficientSpec:
    """Forward kernels b, sigma and the cost pieces l, h, gamma.

    Signatures: ``b(t, s, x, v)``, ``sigma(t, s, x, v)``, ``l(s, x, y, v)``,
    ``h(x)``, ``gamma(y)``. Missing functions and derivatives are zero.
    """

    b: Optional[Callable] = None
    b_x: Optional[Callable] = None
    b_v: Optional[Callable] = None
    sigma: Optional[Callable] = None
    sigma_x: Optional[Callable] = None
    sigma_v: Optional[Callable] = None
    l: Optional[Callable] = None
    l_x: Optional[Callable] = None
    l_y: Optional[Callable] = None
    l_v: Optional[Callable] = None
    h: Optional[Callable] = None
    h_x: Optional[Callable] = None
    gamma: Optional[Callable] = None
    gamma_y: Optional[Callable] = None

    def check(self, rng=None, n_points=64, T=1.0, step=1e-5, tol=1e-6, times=None, bound=1e6):
        """Finite-difference checks plus a boundedness spot-check of derivatives."""
        rng = np.random.default_rng(1) if rng is None else rng
        if times is None:
            times = rng.uniform(0.0, T, size=(n_points, 2))
        zero = lambda *a: 0.0  # noqa: E731
        for t, s in times:
            x, y, v = rng.standard_normal(3)
            for f, fx, fv, nm in ((self.b, self.b_x, self.b_v, "b"), (self.sigma, self.sigma_x, self.sigma_v, "sigma")):
                f = f or zero
                _fd_check(nm + "_x", f, fx, [t, s, x, v], 2, step, tol)
                _fd_check(nm + "_v", f, fv, [t, s, x, v], 3, step, tol)
                for d in (fx, fv):
                    if d is not None and abs(float(np.asarray(d(t, s, x, v)))) > bound:
                        raise SpecError(f"derivative of {nm} exceeds the bound {bound}")
            l = self.l or zero
            _fd_check("l_x", l, self.l_x, [s, x, y, v], 1, step, tol)
            _fd_check("l_y", l, self.l_y, [s, x, y, v], 2, step, tol)
            _fd_check("l_v", l, self.l_v, [s, x, y, v], 3, step, tol)
            _fd_check("h_x", self.h or zero, self.h_x, [x], 0, step, tol)
            _fd_check("gamma_y", self.gamma or zero, self.gamma_y, [y], 0, step, tol)
        return True


@dataclass(frozen=True)
class ControlSet:
    """Closed interval [lo, hi] of admissible control values."""

    lo: float = -np.inf
    hi: float = np.inf

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise SpecError(f"empty control set [{self.lo}, {self.hi}]")

    def project(self, v):
        return np.clip(v, self.lo, self.hi)

    def contains(self, v, tol=1e-12):
        v = np.asarray(v)
        return bool(np.all((v >= self.lo - tol) & (v <= self.hi + tol)))

    def require(self, v):
        if not self.contains(v):
            raise InfeasibleControlError(f"control leaves [{self.lo}, {self.hi}]")

    def samples(self, u, n=33, radius=1.0):
        """``n`` equispaced points of the set within ``radius`` of each ``u``.

        Returns an array of shape ``(n,) + u.shape``.
        """
        u = np.asarray(u, dtype=float)
        a = np.clip(u - radius, self.lo, self.hi)
        b = np.clip(u + radius, self.lo, self.hi)
        w = np.linspace(0.0, 1.0, n).reshape((n,) + (1,) * u.ndim)
        return a + w * (b - a)


def linear_generator(a=0.0, b=0.0, c=0.0, d=0.0, name="linear_bsvie"):
    """g = a*y + b*z + c*zeta + d with constant coefficients."""
    a, b, c, d = map(float, (a, b, c, d))
    return GeneratorSpec(
        g=lambda t, s, x, y, z, zeta, v: a * y + b * z + c * zeta + d,
        g_y=(lambda *args: a) if a else None,
        g_z=(lambda *args: b) if b else None,
        g_zeta=(lambda *args: c) if c else None,
        L1=abs(a), L2=abs(b), L3=abs(c), name=name,
    )


def _sine_generator(a=0.5, c=0.5, name="mixed"):
    """g = a*sin(y) + c*sin(zeta): Lipschitz, nonlinear in both arguments."""
    a, c = float(a), float(c)
    return GeneratorSpec(
        g=lambda t, s, x, y, z, zeta, v: a * np.sin(y) + c * np.sin(zeta),
        g_y=(lambda t, s, x, y, z, zeta, v: a * np.cos(y)) if a else None,
        g_zeta=(lambda t, s, x, y, z, zeta, v: c * np.cos(zeta)) if c else None,
        L1=abs(a), L2=0.0, L3=abs(c), name=name,
    )


def finance_generator(r=0.0, k1=0.0, k2=0.0, name="finance_risk"):
    """g = r*y + k1*zeta + k2 with constant coefficients."""
    return linear_generator(a=r, c=k1, d=k2, name=name)


GENERATOR_PRESETS = {
    "zero": lambda: linear_generator(name="zero"),
    "linear_bsvie": linear_generator,
    "lipschitz_y": lambda a=0.5: _sine_generator(a=a, c=0.0, name="lipschitz_y"),
    "lipschitz_zeta": lambda c=0.5: _sine_generator(a=0.0, c=c, name="lipschitz_zeta"),
    "mixed": _sine_generator,
    "finance_risk": finance_generator,
    "finance_case2": lambda k1=0.0, k2=0.0: finance_generator(r=0.0, k1=k1, k2=k2, name="finance_case2"),
}


def register_generator(key, factory, check=True):
    """Register a generator factory under ``key``; runs the self-check once."""
    if check:
        factory().check()
    GENERATOR_PRESETS[key] = factory


def make_generator(key, **params):
    try:
        factory = GENERATOR_PRESETS[key]
    except KeyError:
        raise SpecError(f"unknown generator preset {key!r}") from None
    return factory(**params)
