"""Time grid and binary scenario tree for a one-dimensional Wiener process.

Every process lives on the leaves of a full (non-recombining) binary tree.
An adapted value at level k is stored leaf-expanded: an array with one entry
per leaf whose entries are constant on the blocks of 2**(N-k) leaves that
share a level-k ancestor. With this layout conditional expectation is a
block average and all arithmetic between processes is plain numpy.

Leaf ``m`` takes the up move (+sqrt(h)) at step ``k`` when bit ``N-1-k`` of
``m`` is zero. The level-k ancestor of leaf ``m`` is node ``m >> (N-k)`` and
the children of node ``n`` are ``2n`` (up) and ``2n + 1`` (down).
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e

from .errors import SpecError

MAX_EXACT_STEPS = 20


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into N steps."""

    T: float
    N: int
    t: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise SpecError(f"number of steps must be a positive integer, got {self.N}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise SpecError(f"horizon must be positive and finite, got {self.T}")
        object.__setattr__(self, "N", int(self.N))
        t = self.T * np.arange(self.N + 1) / self.N
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @property
    def h(self):
        return self.T / self.N

    def index(self, s):
        """Grid index of time ``s`` (which must be a grid node)."""
        k = int(round(float(s) / self.h))
        if not 0 <= k <= self.N or abs(k * self.h - s) > 1e-9 * max(1.0, self.T):
            raise SpecError(f"time {s} is not a grid node")
        return k


class ScenarioTree:
    """Exact binary tree with Rademacher increments of size sqrt(h).

    Attributes
    ----------
    grid : TimeGrid
    N, h, T, t : grid shortcuts
    n_paths : number of leaves, 2**N
    dW : array (N, n_paths), the increment taken at each step on each leaf
    W : array (N+1, n_paths), W(t_k) along each leaf path
    """

    exact = True

    def __init__(self, grid):
        if grid.N > MAX_EXACT_STEPS:
            raise SpecError(f"exact tree supports at most {MAX_EXACT_STEPS} steps, got {grid.N}")
        self.grid = grid
        self.N = grid.N
        self.h = grid.h
        self.T = grid.T
        self.t = grid.t
        self.sqrt_h = np.sqrt(grid.h)
        self.n_paths = 1 << self.N
        leaves = np.arange(self.n_paths)
        shifts = self.N - 1 - np.arange(self.N)
        bits = (leaves[None, :] >> shifts[:, None]) & 1
        self.dW = np.where(bits == 0, self.sqrt_h, -self.sqrt_h)
        self.W = np.zeros((self.N + 1, self.n_paths))
        np.cumsum(self.dW, axis=0, out=self.W[1:])
        for a in (self.dW, self.W):
            a.setflags(write=False)

    @classmethod
    def build(cls, T, N):
        return cls(TimeGrid(T, N))

    def _check_level(self, k, top=None):
        top = self.N if top is None else top
        if int(k) != k or not 0 <= k <= top:
            raise SpecError(f"level {k} outside [0, {top}]")
        return int(k)

    def expectation(self, v):
        """E[v] over the leaf axis."""
        return np.asarray(v).mean(axis=-1)

    def project(self, v, k):
        """Leaf-expanded conditional expectation E[v | F_{t_k}]."""
        k = self._check_level(k)
        v = np.asarray(v, dtype=float)
        blocks = v.reshape(v.shape[:-1] + (1 << k, self.n_paths >> k))
        m = blocks.mean(axis=-1, keepdims=True)
        return np.broadcast_to(m, blocks.shape).reshape(v.shape)

    def represent(self, v, k):
        """One-step martingale representation at level k, leaf-expanded.

        Returns ``(m, z)`` with ``m = E[v | F_k]`` and ``z`` the normalised
        up/down difference, so that ``E[v | F_{k+1}] = m + z * dW[k]``.
        """
        k = self._check_level(k, self.N - 1)
        v = np.asarray(v, dtype=float)
        blocks = v.reshape(v.shape[:-1] + (1 << k, 2, self.n_paths >> (k + 1)))
        c = blocks.mean(axis=-1)
        up, down = c[..., 0], c[..., 1]
        width = self.n_paths >> k
        m = np.repeat(0.5 * (up + down), width, axis=-1)
        z = np.repeat((up - down) / (2.0 * self.sqrt_h), width, axis=-1)
        return m, z

    def node_values(self, v, k):
        """Collapse a level-k measurable leaf array to its 2**k node values."""
        k = self._check_level(k)
        v = np.asarray(v)
        return v.reshape(v.shape[:-1] + (1 << k, self.n_paths >> k))[..., 0]

    def expand(self, nodes, k):
        """Leaf-expand an array of 2**k node values."""
        k = self._check_level(k)
        nodes = np.asarray(nodes, dtype=float)
        if nodes.shape[-1] != 1 << k:
            raise SpecError(f"expected {1 << k} node values at level {k}, got {nodes.shape[-1]}")
        return np.repeat(nodes, self.n_paths >> k, axis=-1)

    def is_adapted(self, v, k, tol=0.0):
        """True when ``v`` is constant on every level-k block."""
        v = np.asarray(v)
        blocks = v.reshape(v.shape[:-1] + (1 << k, self.n_paths >> k))
        return bool(np.all(np.abs(blocks - blocks[..., :1]) <= tol))

    def node_of(self, leaf, k):
        return int(leaf) >> (self.N - k)

    def dump_csv(self, path):
        """Write every node as ``level,node_id,W_value``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "node_id", "W_value"])
            for k in range(self.N + 1):
                for n, value in enumerate(self.node_values(self.W[k], k)):
                    w.writerow([k, n, repr(float(value))])


class RegressionLattice:
    """Monte Carlo paths with regression-based conditional expectations.

    Offers the same interface as :class:`ScenarioTree` for step counts beyond
    the exact tree. Conditional expectations at level k are least-squares
    projections on Hermite polynomials of W(t_k); martingale densities are
    projections of ``v * dW_k / h``. Results are approximate: identities that
    hold exactly on the tree hold here only up to sampling and basis error.
    """

    exact = False

    def __init__(self, grid, n_paths=20000, seed=0, degree=3):
        if n_paths < 2 * (degree + 1):
            raise SpecError("too few paths for the regression basis")
        self.grid = grid
        self.N = grid.N
        self.h = grid.h
        self.T = grid.T
        self.t = grid.t
        self.sqrt_h = np.sqrt(grid.h)
        self.n_paths = int(n_paths)
        self.degree = int(degree)
        rng = np.random.default_rng(seed)
        self.dW = self.sqrt_h * rng.standard_normal((self.N, self.n_paths))
        self.W = np.zeros((self.N + 1, self.n_paths))
        np.cumsum(self.dW, axis=0, out=self.W[1:])
        self._bases = [None]
        for k in range(1, self.N + 1):
            x = self.W[k] / np.sqrt(self.t[k])
            q, _ = np.linalg.qr(hermite_e.hermevander(x, self.degree))
            self._bases.append(q)

    def expectation(self, v):
        return np.asarray(v).mean(axis=-1)

    def project(self, v, k):
        v = np.asarray(v, dtype=float)
        if k == 0:
            return np.broadcast_to(v.mean(axis=-1, keepdims=True), v.shape).copy()
        q = self._bases[k]
        return (v @ q) @ q.T

    def represent(self, v, k):
        v = np.asarray(v, dtype=float)
        return self.project(v, k), self.project(v * self.dW[k], k) / self.h


def conditional_expectation(tree, v, k):
    """Node values of E[v | F_{t_k}] for leaf values ``v``."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != tree.n_paths:
        raise SpecError(f"expected {tree.n_paths} leaf values, got {v.shape[-1]}")
    return tree.node_values(tree.project(v, k), k)


def martingale_representation(tree, v, k):
    """Node values ``(m, z)`` of the one-step representation at level k.

    ``v`` holds either the 2**(k+1) node values at level k+1 or leaf values.
    """
    v = np.asarray(v, dtype=float)
    k = tree._check_level(k, tree.N - 1)
    if v.shape[-1] == 1 << (k + 1) and v.shape[-1] != tree.n_paths:
        v = tree.expand(v, k + 1)
    m, z = tree.represent(v, k)
    return tree.node_values(m, k), tree.node_values(z, k)


def integrate_drift(tree, f, a, b):
    """Pathwise left-point sum of f(t_k) h for k = a, ..., b-1.

    ``f`` has one row per grid time (shape (N+1,) or (N+1, n_paths)).
    """
    if a > b:
        raise SpecError(f"integration bounds out of order: {a} > {b}")
    f = np.asarray(f, dtype=float)
    if b == a:
        return np.zeros(f.shape[1:])
    return f[a:b].sum(axis=0) * tree.h


def stochastic_integral(tree, z, a, b):
    """Pathwise sum of z(t_k) dW_k for k = a, ..., b-1."""
    if a > b:
        raise SpecError(f"integration bounds out of order: {a} > {b}")
    z = np.asarray(z, dtype=float)
    if b == a:
        return np.zeros(tree.n_paths)
    return (z[a:b] * tree.dW[a:b]).sum(axis=0)
