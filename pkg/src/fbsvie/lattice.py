"""Exact finite filtered probability space on a binary scenario tree.

Level ``k`` of the tree holds ``2**k`` nodes. A node is addressed by the
integer whose binary digits are its first ``k`` moves, most significant bit
first, with 0 for an up move. Children of node ``n`` at level ``k`` are
``2n`` (up) and ``2n + 1`` (down) at level ``k + 1``, and the leaves below
it are the contiguous block ``n * 2**(N-k) .. (n + 1) * 2**(N-k) - 1``.

The Brownian increment over ``[t_k, t_{k+1})`` is ``+sqrt(dt)`` on up moves
and ``-sqrt(dt)`` on down moves, each with probability 1/2. Every
conditional expectation is therefore an exact finite average.

Arrays of node values always carry the node axis first: a level-``k``
quantity of dimension ``d`` has shape ``(2**k, d)`` (or ``(2**k, d, e)`` for
matrix-valued data).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

MAX_STEPS = 12

FULL_SQUARE = "full"
UPPER_TRIANGLE = "upper"


def level_of(a: np.ndarray) -> int:
    """Tree level of a node-indexed array, read off its leading axis."""
    size = a.shape[0]
    level = size.bit_length() - 1
    if size < 1 or (1 << level) != size:
        raise ValueError(f"leading axis {size} is not a power of two")
    return level


class NonFiniteValue(ArithmeticError):
    """A solver produced NaN or infinity (coefficient blow-up)."""


def check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue(f"non-finite value in {what}")
    return a


def matvec(mat: np.ndarray, v: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Node-wise ``mat @ v`` for ``(P, a, b)`` matrices and ``(P, b)`` vectors.

    Either argument may live on a coarser level; it is repeated to match.
    """
    p = max(mat.shape[0], v.shape[0])
    mat = np.repeat(mat, p // mat.shape[0], axis=0)
    v = np.repeat(v, p // v.shape[0], axis=0)
    return np.einsum("pba,pb->pa" if transpose else "pab,pb->pa", mat, v)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def time(self, k: int) -> float:
        return k * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


class ScenarioTree:
    """Binary non-recombining tree with Rademacher increments.

    Immutable after construction. All methods are pure functions of their
    arguments.
    """

    def __init__(self, grid: TimeGrid):
        if grid.steps > MAX_STEPS:
            raise ValueError(f"steps must be <= {MAX_STEPS}, got {grid.steps}")
        self.grid = grid
        self.N = grid.steps
        self.dt = grid.dt
        self.sqrt_dt = math.sqrt(grid.dt)
        self._dw = []
        for k in range(self.N):
            dw = np.empty(2 ** (k + 1))
            dw[0::2] = self.sqrt_dt
            dw[1::2] = -self.sqrt_dt
            dw.flags.writeable = False
            self._dw.append(dw)

    @classmethod
    def build(cls, steps: int, horizon: float = 1.0) -> "ScenarioTree":
        return cls(TimeGrid(horizon=horizon, steps=steps))

    def __repr__(self):
        return f"ScenarioTree(steps={self.N}, horizon={self.grid.horizon})"

    @property
    def T(self) -> float:
        return self.grid.horizon

    @property
    def n_leaves(self) -> int:
        return 2 ** self.N

    def nodes(self, k: int) -> int:
        self._check_level(k)
        return 2 ** k

    def time(self, k: int) -> float:
        return self.grid.time(k)

    def leaf_probabilities(self) -> np.ndarray:
        return np.full(self.n_leaves, 1.0 / self.n_leaves)

    def _check_level(self, k: int):
        if not 0 <= k <= self.N:
            raise IndexError(f"time index {k} outside 0..{self.N}")

    # -- increments and paths ------------------------------------------------

    def increment(self, k: int) -> np.ndarray:
        """``dW_k`` as a level-``(k+1)`` node vector."""
        if not 0 <= k < self.N:
            raise IndexError(f"increment index {k} outside 0..{self.N - 1}")
        return self._dw[k]

    def brownian(self, k: int) -> np.ndarray:
        """``W(t_k)`` as a level-``k`` node vector."""
        self._check_level(k)
        w = np.zeros(1)
        for j in range(k):
            w = np.repeat(w, 2) + self._dw[j]
        return w

    # -- moving between levels ------------------------------------------------

    def lift(self, a: np.ndarray, to: Optional[int] = None) -> np.ndarray:
        """Re-index a level-``k`` array on a finer level (leaves by default)."""
        k = level_of(a)
        to = self.N if to is None else to
        if to < k:
            raise ValueError(f"cannot lift level {k} to coarser level {to}")
        if to == k:
            return a
        return np.repeat(a, 2 ** (to - k), axis=0)

    def cond_expect(self, x: np.ndarray, r: int) -> np.ndarray:
        """``E[x | F_{t_r}]`` as a level-``r`` node array.

        ``x`` may live on any level at or below ``r``'s; leaf-indexed input
        is the usual case.
        """
        self._check_level(r)
        x = np.asarray(x, dtype=float)
        k = level_of(x)
        if r > k:
            return self.lift(x, r)
        if r == k:
            return x
        # pairwise halving, the same arithmetic as a backward sweep
        for _ in range(k - r):
            x = 0.5 * (x[0::2] + x[1::2])
        return x

    def expect(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float).mean(axis=0)

    def times_increment(self, a: np.ndarray, k: int) -> np.ndarray:
        """``a * dW_k`` for a level-``k`` array, as a level-``(k+1)`` array."""
        a2 = np.repeat(a, 2, axis=0)
        dw = self.increment(k)
        return a2 * dw.reshape((-1,) + (1,) * (a2.ndim - 1))

    # -- stochastic calculus --------------------------------------------------

    def ito_integral(self, z: "AdaptedProcess", start: int = 0,
                     stop: Optional[int] = None) -> np.ndarray:
        """``sum_{k=start}^{stop-1} z(k) dW_k`` as a leaf array."""
        stop = self.N if stop is None else stop
        if not 0 <= start <= stop <= self.N:
            raise IndexError(f"integration range {start}..{stop} outside 0..{self.N}")
        out = np.zeros((self.n_leaves, z.dim))
        for k in range(start, stop):
            out += self.lift(self.times_increment(z[k], k))
        return out

    def martingale_repr(self, y: np.ndarray):
        """Split a node array into its mean and its integrand against ``dW``.

        ``y`` lives on some level ``L``; returns ``(mean, z)`` with ``z`` an
        :class:`AdaptedProcess` over ``0..L-1`` such that
        ``y = mean + sum_k z(k) dW_k`` node by node.
        """
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        top = level_of(y)
        coeffs = [None] * top
        v = y
        for k in range(top - 1, -1, -1):
            up, down = v[0::2], v[1::2]
            coeffs[k] = (up - down) / (2.0 * self.sqrt_dt)
            v = 0.5 * (up + down)
        mean = v[0]
        return mean, AdaptedProcess(coeffs)

    def weighted_norm(self, y: "AdaptedProcess", z: Optional["VolterraField"],
                      beta: float = 0.0) -> float:
        """Squared beta-weighted norm of a pair ``(y, z)``.

        ``sum_i e^{beta t_i} (E|y_i|^2 + sum_{j>=i} E|z(i,j)|^2 dt) dt`` over
        ``i = 0..N-1``; only the ``j >= i`` part of ``z`` enters.
        """
        dt = self.dt
        total = 0.0
        for i in range(min(len(y), self.N)):
            inner = float(np.mean(np.sum(y[i] ** 2, axis=-1)))
            if z is not None and i < z.rows:
                for j in range(i, self.N):
                    zij = z.get(i, j)
                    if zij is not None:
                        inner += float(np.mean(np.sum(zij ** 2, axis=-1))) * dt
            total += math.exp(beta * i * dt) * inner * dt
        return total


@dataclass
class AdaptedProcess:
    """Process whose value at time index ``k`` is stored per level-``k`` node."""

    values: list = field(default_factory=list)

    def __post_init__(self):
        self.values = [np.asarray(v, dtype=float) for v in self.values]
        for k, v in enumerate(self.values):
            if v.shape[0] != 2 ** k:
                raise ValueError(f"entry {k} has {v.shape[0]} nodes, expected {2 ** k}")
            if v.ndim < 2:
                raise ValueError(f"entry {k} must be at least 2-D (nodes, dim)")

    @classmethod
    def zeros(cls, count: int, dim: int) -> "AdaptedProcess":
        return cls([np.zeros((2 ** k, dim)) for k in range(count)])

    @classmethod
    def constant(cls, count: int, value) -> "AdaptedProcess":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls([np.tile(value, (2 ** k, 1)) for k in range(count)])

    @classmethod
    def from_function(cls, count: int, fn) -> "AdaptedProcess":
        """Build from ``fn(k, nodes) -> (nodes, dim)``; ``nodes`` are level-k ids."""
        return cls([np.asarray(fn(k, np.arange(2 ** k)), dtype=float) for k in range(count)])

    def __len__(self):
        return len(self.values)

    def __getitem__(self, k):
        return self.values[k]

    def __iter__(self):
        return iter(self.values)

    @property
    def dim(self) -> int:
        return self.values[0].shape[1]

    def leaves(self, tree: ScenarioTree) -> np.ndarray:
        """All entries re-indexed by leaf: shape ``(count, 2**N, dim)``."""
        return np.stack([tree.lift(v) for v in self.values])

    def map(self, fn) -> "AdaptedProcess":
        return AdaptedProcess([fn(k, v) for k, v in enumerate(self.values)])

    def __add__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        return AdaptedProcess([a + b for a, b in zip(self.values, other.values)])

    def __sub__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        return AdaptedProcess([a - b for a, b in zip(self.values, other.values)])

    def __mul__(self, c: float) -> "AdaptedProcess":
        return AdaptedProcess([c * a for a in self.values])

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v))) for v in self.values), default=0.0)


@dataclass
class TerminalProcess:
    """Time-indexed family of ``F_T``-measurable vectors: ``data[k, leaf, :]``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise ValueError("TerminalProcess data must have shape (count, leaves, dim)")
        level_of(self.data[0])

    @classmethod
    def zeros(cls, tree: ScenarioTree, count: int, dim: int) -> "TerminalProcess":
        return cls(np.zeros((count, tree.n_leaves, dim)))

    @classmethod
    def from_adapted(cls, tree: ScenarioTree, x: AdaptedProcess) -> "TerminalProcess":
        return cls(x.leaves(tree))

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, k):
        return self.data[k]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def project(self, tree: ScenarioTree) -> AdaptedProcess:
        """``E[x(k) | F_{t_k}]`` for every index ``k``."""
        return AdaptedProcess([tree.cond_expect(self.data[k], k) for k in range(len(self))])


class VolterraField:
    """Two-parameter process ``Z(i, j)`` stored per level-``j`` node.

    ``rows`` outer indices, inner indices ``0..N-1``. An UPPER_TRIANGLE field
    has no storage for ``j < i``.
    """

    def __init__(self, tree: ScenarioTree, rows: int, dim: int, domain: str = FULL_SQUARE,
                 values: Optional[Sequence[Sequence[Optional[np.ndarray]]]] = None):
        if domain not in (FULL_SQUARE, UPPER_TRIANGLE):
            raise ValueError(f"unknown domain {domain!r}")
        self.N = tree.N
        self.rows = rows
        self.dim = dim
        self.domain = domain
        if values is None:
            self._v = [[self._blank(i, j) for j in range(self.N)] for i in range(rows)]
        else:
            self._v = [[None if a is None else np.asarray(a, dtype=float) for a in row]
                       for row in values]
            for i, row in enumerate(self._v):
                for j, a in enumerate(row):
                    if a is not None:
                        if domain == UPPER_TRIANGLE and j < i:
                            raise ValueError("upper-triangle field cannot hold j < i entries")
                        if a.shape[0] != 2 ** j:
                            raise ValueError(f"entry ({i},{j}) is not level {j}")

    def _blank(self, i, j):
        if self.domain == UPPER_TRIANGLE and j < i:
            return None
        return np.zeros((2 ** j, self.dim))

    def get(self, i: int, j: int) -> Optional[np.ndarray]:
        return self._v[i][j]

    def __getitem__(self, ij):
        i, j = ij
        a = self._v[i][j]
        if a is None:
            raise KeyError(f"({i},{j}) not stored in {self.domain} field")
        return a

    def __setitem__(self, ij, value):
        i, j = ij
        if self.domain == UPPER_TRIANGLE and j < i:
            raise KeyError("upper-triangle field cannot hold j < i entries")
        value = np.asarray(value, dtype=float)
        if value.shape[0] != 2 ** j:
            raise ValueError(f"entry ({i},{j}) must have {2 ** j} nodes")
        self._v[i][j] = value

    def entries(self) -> Iterable:
        for i, row in enumerate(self._v):
            for j, a in enumerate(row):
                if a is not None:
                    yield i, j, a

    @classmethod
    def _raw(cls, like: "VolterraField", values, domain: Optional[str] = None) -> "VolterraField":
        out = cls.__new__(cls)
        out.N, out.rows, out.dim = like.N, like.rows, like.dim
        out.domain = like.domain if domain is None else domain
        out._v = values
        return out

    def copy(self) -> "VolterraField":
        return self._raw(self, [[None if a is None else a.copy() for a in row] for row in self._v])

    def upper(self) -> "VolterraField":
        """The ``j >= i`` part as an UPPER_TRIANGLE field (shares arrays)."""
        return self._raw(self, [[a if j >= i else None for j, a in enumerate(row)]
                                for i, row in enumerate(self._v)], UPPER_TRIANGLE)

    def _combine(self, other: "VolterraField", op) -> "VolterraField":
        vals = []
        for i in range(self.rows):
            row = []
            for j in range(self.N):
                a, b = self._v[i][j], other._v[i][j]
                row.append(None if a is None or b is None else op(a, b))
            vals.append(row)
        return self._raw(self, vals)

    def __add__(self, other: "VolterraField") -> "VolterraField":
        return self._combine(other, np.add)

    def __sub__(self, other: "VolterraField") -> "VolterraField":
        return self._combine(other, np.subtract)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(a))) for _, _, a in self.entries()), default=0.0)
