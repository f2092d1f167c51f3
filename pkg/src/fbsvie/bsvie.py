"""Backward stochastic Volterra equations by Picard iteration of BSDE families.

The discrete equation for outer index ``i`` reads

    Y_i = psi_i + sum_{j=i}^{N-1} g(i, j, Y_j, Z(i,j), Z(j,i)) dt
                - sum_{j=i}^{N-1} Z(i,j) dW_j.

For fixed ``i`` and frozen ``(y, z')`` this is a backward recursion in
``j``, so one Picard sweep solves ``N`` independent BSDEs. For an
M-solution the entries ``Z(i,j)``, ``j < i`` are then fixed by the
martingale representation ``Y_i = E Y_i + sum_{j<i} Z(i,j) dW_j``; at
``j = i`` the z' slot reads the diagonal ``Z(i,i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .lattice import (FULL_SQUARE, UPPER_TRIANGLE, AdaptedProcess, ScenarioTree,
                      TerminalProcess, VolterraField, check_finite)

Generator = Callable[[int, int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class NoConvergence(RuntimeError):
    """Picard iteration hit ``max_iter``; refine the grid (dt * Lipschitz too large)."""

    def __init__(self, iterations: int, residual: float):
        super().__init__(f"no convergence after {iterations} iterations "
                         f"(last difference {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass
class GeneratorSpec:
    """Free term ``psi`` (one leaf array per outer index) and generator.

    ``generator(i, r, y, z, zp)`` receives level-``r`` arrays and returns the
    level-``r`` drift for outer index ``i`` at inner index ``r``.
    With ``N + 1`` rows in ``psi`` the solution carries ``Y_N = psi_N``.
    """

    psi: TerminalProcess
    generator: Optional[Generator] = None
    uses_zprime: bool = True

    def __post_init__(self):
        if not np.all(np.isfinite(self.psi.data)):
            raise ValueError("free term has non-finite entries")

    @property
    def dim(self) -> int:
        return self.psi.dim


@dataclass(frozen=True)
class SolverConfig:
    picard_tol: float = 1e-11
    max_iter: int = 200
    beta: Optional[float] = None

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be nonnegative")

    def weight(self, tree: ScenarioTree) -> float:
        return 2.0 * tree.N / tree.T if self.beta is None else self.beta


@dataclass
class BSVIESolution:
    """``iterations`` counts sweeps that moved the iterate by more than the
    tolerance; ``trail`` holds the weighted norm of every iterate difference."""

    Y: AdaptedProcess
    Z: VolterraField
    iterations: int = 0
    trail: list = field(default_factory=list)
    residual: float = 0.0


class MSolution(BSVIESolution):
    pass


class AdaptedSolution(BSVIESolution):
    pass


def bsde_family_sweep(tree: ScenarioTree, spec: GeneratorSpec, y: AdaptedProcess,
                      z: Optional[VolterraField]):
    """One Picard sweep with ``y`` and the z' slice of ``z`` frozen.

    Returns ``(Y, Z_upper)``; the z' argument at inner index ``r`` reads
    ``z(r, i)`` lifted to level ``r``.
    """
    N, dt, sq = tree.N, tree.dt, tree.sqrt_dt
    rows, m = len(spec.psi), spec.dim
    zu = VolterraField(tree, rows, m, UPPER_TRIANGLE)
    ys = []
    for i in range(rows):
        eta = spec.psi[i]
        for r in range(N - 1, i - 1, -1):
            up, dn = eta[0::2], eta[1::2]
            zeta = (up - dn) / (2.0 * sq)
            eta = 0.5 * (up + dn)
            if spec.generator is not None:
                if spec.uses_zprime and z is not None:
                    zp = tree.lift(z[r, i], r)
                else:
                    zp = np.zeros_like(zeta)
                eta = eta + spec.generator(i, r, y[r], zeta, zp) * dt
            zu[i, r] = zeta
        ys.append(check_finite(eta, f"Y({i})"))
    return AdaptedProcess(ys), zu


def extend_to_msolution(tree: ScenarioTree, Y: AdaptedProcess, Z_upper: VolterraField) -> VolterraField:
    """Full-square Z whose ``j < i`` part represents ``Y_i - E Y_i``."""
    if Z_upper.domain != UPPER_TRIANGLE:
        raise ValueError("expected an upper-triangle field")
    vals = [[Z_upper.get(i, j) for j in range(tree.N)] for i in range(Z_upper.rows)]
    for i in range(1, Z_upper.rows):
        _, coeffs = tree.martingale_repr(Y[i])
        for j in range(i):
            vals[i][j] = coeffs[j]
    return VolterraField(tree, Z_upper.rows, Z_upper.dim, FULL_SQUARE, vals)


def _picard(tree, spec, cfg, msolution, initial):
    cfg = cfg or SolverConfig()
    rows, m = len(spec.psi), spec.dim
    if rows not in (tree.N, tree.N + 1):
        raise ValueError(f"free term needs {tree.N} or {tree.N + 1} rows, got {rows}")
    domain = FULL_SQUARE if msolution else UPPER_TRIANGLE
    if initial is None:
        y = AdaptedProcess.zeros(rows, m)
        z = VolterraField(tree, rows, m, domain)
    else:
        y, z = initial
        if len(y) < tree.N:
            raise ValueError("initial Y must cover indices 0..N-1")
    beta = cfg.weight(tree)
    trail, moved = [], 0
    for _ in range(cfg.max_iter):
        Y, zu = bsde_family_sweep(tree, spec, y, z)
        Z = extend_to_msolution(tree, Y, zu) if msolution else zu
        dy = AdaptedProcess([a - b for a, b in zip(Y.values, y.values)])
        diff = math.sqrt(tree.weighted_norm(dy, Z.upper() - z.upper(), beta))
        trail.append(diff)
        y, z = Y, Z
        if diff <= cfg.picard_tol:
            cls = MSolution if msolution else AdaptedSolution
            out = cls(Y, Z, moved, trail)
            out.residual = bsvie_residual(tree, spec, Y, Z)
            return out
        moved += 1
    raise NoConvergence(cfg.max_iter, trail[-1])


def solve_bsvie_msolution(tree: ScenarioTree, spec: GeneratorSpec,
                          cfg: Optional[SolverConfig] = None, initial=None) -> MSolution:
    """Adapted M-solution; ``initial`` is an optional starting pair ``(y, z)``."""
    return _picard(tree, spec, cfg, True, initial)


def solve_bsvie_adapted(tree: ScenarioTree, spec: GeneratorSpec,
                        cfg: Optional[SolverConfig] = None, initial=None) -> AdaptedSolution:
    """Adapted solution for a generator that ignores z'."""
    if spec.uses_zprime:
        raise ValueError("adapted solutions need a generator without the z' slot")
    return _picard(tree, spec, cfg, False, initial)


def bsvie_residual(tree: ScenarioTree, spec: GeneratorSpec, Y: AdaptedProcess,
                   Z: VolterraField) -> float:
    """Largest leaf-wise defect of the discrete equation over all outer indices."""
    N, dt = tree.N, tree.dt
    worst = 0.0
    for i in range(len(spec.psi)):
        rhs = spec.psi[i].copy()
        for j in range(i, N):
            zij = Z[i, j]
            if spec.generator is not None:
                if spec.uses_zprime and Z.domain == FULL_SQUARE:
                    zp = tree.lift(Z[j, i], j)
                else:
                    zp = np.zeros_like(zij)
                rhs += tree.lift(spec.generator(i, j, Y[j], zij, zp) * dt)
            rhs -= tree.lift(tree.times_increment(zij, j))
        worst = max(worst, float(np.max(np.abs(tree.lift(Y[i]) - rhs))))
    return worst


def m_property_defect(tree: ScenarioTree, Y: AdaptedProcess, Z: VolterraField) -> float:
    """Largest leaf-wise defect of ``Y_i = E Y_i + sum_{j<i} Z(i,j) dW_j``."""
    worst = 0.0
    for i in range(min(len(Y), Z.rows)):
        rec = np.tile(tree.expect(Y[i]), (2 ** i, 1))
        for j in range(i):
            rec = rec + tree.lift(tree.times_increment(Z[i, j], j), i)
        worst = max(worst, float(np.max(np.abs(rec - Y[i]))))
    return worst


def isometry_defect(tree: ScenarioTree, Y: AdaptedProcess, Z: VolterraField) -> float:
    """Largest defect of ``E|Y_i|^2 = |E Y_i|^2 + sum_{j<i} E|Z(i,j)|^2 dt``."""
    worst = 0.0
    for i in range(min(len(Y), Z.rows)):
        lhs = float(np.mean(np.sum(Y[i] ** 2, axis=1)))
        rhs = float(np.sum(tree.expect(Y[i]) ** 2))
        rhs += sum(float(np.mean(np.sum(Z[i, j] ** 2, axis=1))) * tree.dt for j in range(i))
        worst = max(worst, abs(lhs - rhs))
    return worst
