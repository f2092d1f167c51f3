"""Forward stochastic Volterra equations by explicit recursion on the tree.

The discrete equation uses left endpoints:

    X_i = phi(t_i) + sum_{j<i} b(t_i, t_j, X_j, u_j) dt
                   + sum_{j<i} sigma(t_i, t_j, X_j, u_j) dW_j

so the kernels are re-evaluated at every outer time ``t_i``; the increments
of X depend on the whole past, not only on the last state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .coefficients import CoefficientSet
from .lattice import AdaptedProcess, ScenarioTree, check_finite, matvec


@dataclass
class ForwardSolution:
    X: AdaptedProcess

    def __len__(self):
        return len(self.X)


def _check_control(tree: ScenarioTree, c: CoefficientSet, u: AdaptedProcess):
    if len(u) < tree.N:
        raise ValueError(f"control has {len(u)} entries, need at least {tree.N}")
    if u.dim != c.l:
        raise ValueError(f"control dimension {u.dim} does not match l = {c.l}")


def solve_fsvie(tree: ScenarioTree, c: CoefficientSet, u: AdaptedProcess) -> ForwardSolution:
    """State process ``X_0 .. X_N`` driven by the adapted control ``u``."""
    _check_control(tree, c, u)
    dt = tree.dt
    xs = []
    for i in range(tree.N + 1):
        ti = tree.time(i)
        x = np.tile(c.phi_at(ti), (2 ** i, 1))
        for j in range(i):
            tj = tree.time(j)
            drift = c.b(ti, tj, xs[j], u[j]) * dt
            diff = tree.times_increment(c.sigma(ti, tj, xs[j], u[j]), j)
            x = x + tree.lift(drift, i) + tree.lift(diff, i)
        xs.append(check_finite(x, f"X({i})"))
    return ForwardSolution(AdaptedProcess(xs))


def solve_linear_fsvie(tree: ScenarioTree, A0: Sequence[Sequence[Optional[np.ndarray]]],
                       C0: Sequence[Sequence[Optional[np.ndarray]]],
                       phi: AdaptedProcess) -> ForwardSolution:
    """Linear equation ``X_i = phi_i + sum_{j<i} A0(i,j) X_j dt + C0(i,j) X_j dW_j``.

    ``A0[i][j]`` (``j < i``) is a level-``j`` array of ``(n, n)`` matrices;
    ``None`` stands for zero. One row per entry of ``phi``.
    """
    dt = tree.dt
    xs = []
    for i in range(len(phi)):
        x = np.array(phi[i], dtype=float)
        for j in range(i):
            a, cmat = A0[i][j], C0[i][j]
            if a is not None:
                x = x + tree.lift(matvec(a, xs[j]) * dt, i)
            if cmat is not None:
                x = x + tree.lift(tree.times_increment(matvec(cmat, xs[j]), j), i)
        xs.append(check_finite(x, f"X({i})"))
    return ForwardSolution(AdaptedProcess(xs))
