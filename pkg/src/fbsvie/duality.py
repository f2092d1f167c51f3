"""Linear BSVIEs, their adjoint (Fredholm-Volterra) equation and the duality pairing.

Linear equation, outer index ``i < N``:

    Y_i = psi_i + sum_{j>=i} [A(i,j) Y_j + B(i,j) Z(i,j) + C(i,j) Z(j,i)] dt
                - sum_{j>=i} Z(i,j) dW_j

Adjoint equation for data ``(alpha, beta)``. ``xi_i`` is a leaf array and
need not be adapted; ``E_r`` is conditional expectation at level ``r``:

    xi_i = alpha_i + sum_{j<i} beta(i,j) dW_j
         + sum_{k<=i} A(k,i)' E_i xi_k dt + sum_{k<i} E_k[C(k,i)' xi_k] dW_k
         + sum_{j>=i} (B(i,j)' E_j xi_i + beta(i,j)) dW_j + C(i,i)' E_i xi_i dW_i

The duality pairing is

    dt sum_i E<psi_i, xi_i> = dt sum_i E<Y_i, alpha_i> + dt^2 sum_{i,j} E<Z(i,j), beta(i,j)>

Both double sums carry the weight ``dt**2`` (left endpoints on both axes);
mixing in any other convention breaks the identity. The diagonal terms
``A(i,i)`` and ``C(i,i)`` are what make the identity exact on the tree: the
``A(i,i)`` term is implicit and is solved node by node inside each slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .bsvie import (GeneratorSpec, MSolution, NoConvergence, SolverConfig,
                    solve_bsvie_msolution)
from .fsvie import solve_linear_fsvie
from .lattice import (FULL_SQUARE, AdaptedProcess, ScenarioTree, TerminalProcess,
                      VolterraField, check_finite, matvec)

KernelTable = List[List[Optional[np.ndarray]]]


def zero_kernel(N: int) -> KernelTable:
    return [[None] * N for _ in range(N)]


def kernel_bound(table: KernelTable) -> float:
    return max((float(np.max(np.abs(a))) for row in table for a in row if a is not None),
               default=0.0)


@dataclass
class LinearBSVIEData:
    """``A[i][j]`` etc. are level-``j`` arrays of ``(m, m)`` matrices or ``None``."""

    A: KernelTable
    B: KernelTable
    C: KernelTable
    psi: TerminalProcess

    @property
    def m(self) -> int:
        return self.psi.dim

    @property
    def bound(self) -> float:
        return max(kernel_bound(self.A), kernel_bound(self.B), kernel_bound(self.C))

    def generator(self):
        A, B, C = self.A, self.B, self.C

        def g(i, r, y, z, zp):
            out = np.zeros_like(z)
            if A[i][r] is not None:
                out += matvec(A[i][r], y)
            if B[i][r] is not None:
                out += matvec(B[i][r], z)
            if C[i][r] is not None:
                out += matvec(C[i][r], zp)
            return out

        return g

    @property
    def uses_zprime(self) -> bool:
        return any(a is not None for row in self.C for a in row)


@dataclass
class AdjointData:
    alpha: AdaptedProcess
    beta: VolterraField


@dataclass
class XiSolution:
    xi: TerminalProcess
    iterations: int = 0
    trail: list = field(default_factory=list)
    residual: float = 0.0


@dataclass
class XiSlice:
    """Forward recursion for one outer index: ``lam[r - i] = E_r xi_i`` and
    ``zeta[r - i]`` its integrand against ``dW_r``."""

    xi: np.ndarray
    lam: list
    zeta: list


def solve_linear_bsvie(tree: ScenarioTree, d: LinearBSVIEData,
                       cfg: Optional[SolverConfig] = None, initial=None) -> MSolution:
    spec = GeneratorSpec(d.psi, d.generator(), d.uses_zprime)
    return solve_bsvie_msolution(tree, spec, cfg, initial)


def _xi_base(tree: ScenarioTree, i: int, xi_bar, d: LinearBSVIEData, a: AdjointData) -> np.ndarray:
    dt = tree.dt
    base = np.array(a.alpha[i], dtype=float)
    for j in range(i):
        base += tree.lift(tree.times_increment(a.beta[i, j], j), i)
    for k in range(i):
        if d.A[k][i] is not None:
            base += matvec(d.A[k][i], tree.cond_expect(xi_bar[k], i), transpose=True) * dt
        if d.C[k][i] is not None:
            ck = tree.cond_expect(matvec(d.C[k][i], xi_bar[k], transpose=True), k)
            base += tree.lift(tree.times_increment(ck, k), i)
    return base


def xi_forward_slice(tree: ScenarioTree, i: int, xi_bar, d: LinearBSVIEData,
                     a: AdjointData) -> XiSlice:
    """Solve the adjoint equation for ``xi_i`` with ``xi_k``, ``k < i`` frozen."""
    dt = tree.dt
    base = _xi_base(tree, i, xi_bar, d, a)
    if d.A[i][i] is not None:
        m = base.shape[1]
        lhs = np.eye(m)[None] - dt * np.swapaxes(d.A[i][i], 1, 2)
        base = np.linalg.solve(lhs, base[..., None])[..., 0]
    lam, zetas = [base], []
    diag = matvec(d.C[i][i], base, transpose=True) if d.C[i][i] is not None else None
    cur = base
    for r in range(i, tree.N):
        zeta = np.array(a.beta[i, r], dtype=float)
        if d.B[i][r] is not None:
            zeta = zeta + matvec(d.B[i][r], cur, transpose=True)
        if r == i and diag is not None:
            zeta = zeta + diag
        cur = np.repeat(cur, 2, axis=0) + tree.times_increment(zeta, r)
        lam.append(cur)
        zetas.append(zeta)
    return XiSlice(check_finite(cur, f"xi({i})"), lam, zetas)


def xi_picard_sweep(tree: ScenarioTree, d: LinearBSVIEData, a: AdjointData,
                    xi_bar: TerminalProcess) -> TerminalProcess:
    rows = len(d.psi)
    return TerminalProcess(np.stack([xi_forward_slice(tree, i, xi_bar, d, a).xi
                                     for i in range(rows)]))


def _weighted_l2(tree: ScenarioTree, diff: np.ndarray, beta: float) -> float:
    total = 0.0
    for i in range(diff.shape[0]):
        total += math.exp(beta * tree.time(i)) * float(np.mean(np.sum(diff[i] ** 2, axis=1))) * tree.dt
    return math.sqrt(total)


def solve_xi(tree: ScenarioTree, d: LinearBSVIEData, a: AdjointData,
             cfg: Optional[SolverConfig] = None) -> XiSolution:
    """Picard iteration from zero; exact after at most ``N`` moving sweeps."""
    cfg = cfg or SolverConfig()
    beta = cfg.weight(tree)
    xi = TerminalProcess.zeros(tree, len(d.psi), d.m)
    trail, moved = [], 0
    for _ in range(cfg.max_iter):
        new = xi_picard_sweep(tree, d, a, xi)
        diff = _weighted_l2(tree, new.data - xi.data, beta)
        trail.append(diff)
        xi = new
        if diff <= cfg.picard_tol:
            return XiSolution(xi, moved, trail, xi_residual(tree, d, a, xi))
        moved += 1
    raise NoConvergence(cfg.max_iter, trail[-1])


def xi_residual(tree: ScenarioTree, d: LinearBSVIEData, a: AdjointData,
                xi: TerminalProcess) -> float:
    """Largest leaf-wise defect of the adjoint equation, assembled term by term."""
    N, dt = tree.N, tree.dt
    worst = 0.0
    for i in range(len(xi)):
        rhs = tree.lift(a.alpha[i]).copy()
        for j in range(N):
            rhs += tree.lift(tree.times_increment(a.beta[i, j], j))
        for k in range(i + 1):
            if d.A[k][i] is not None:
                rhs += tree.lift(matvec(d.A[k][i], tree.cond_expect(xi[k], i), transpose=True)) * dt
        for k in range(i):
            if d.C[k][i] is not None:
                ck = tree.cond_expect(matvec(d.C[k][i], xi[k], transpose=True), k)
                rhs += tree.lift(tree.times_increment(ck, k))
        for j in range(i, N):
            if d.B[i][j] is not None:
                bj = matvec(d.B[i][j], tree.cond_expect(xi[i], j), transpose=True)
                rhs += tree.lift(tree.times_increment(bj, j))
        if d.C[i][i] is not None:
            ci = matvec(d.C[i][i], tree.cond_expect(xi[i], i), transpose=True)
            rhs += tree.lift(tree.times_increment(ci, i))
        worst = max(worst, float(np.max(np.abs(xi[i] - rhs))))
    return worst


@dataclass
class DualityPair:
    lhs: float
    rhs: float
    bsvie: Optional[MSolution] = None
    xi: Optional[XiSolution] = None

    @property
    def abs_err(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def rel_err(self) -> float:
        return self.abs_err / (abs(self.lhs) + 1.0)


def pair_leaves(x: np.ndarray, y: np.ndarray) -> float:
    """``E<x, y>`` for node arrays on possibly different levels."""
    p = max(x.shape[0], y.shape[0])
    x = np.repeat(x, p // x.shape[0], axis=0)
    y = np.repeat(y, p // y.shape[0], axis=0)
    return float(np.mean(np.sum(x * y, axis=1)))


def eval_duality_pair(tree: ScenarioTree, d: LinearBSVIEData, a: AdjointData,
                      cfg: Optional[SolverConfig] = None) -> DualityPair:
    """Both sides of the pairing from independently solved ``(Y, Z)`` and ``xi``."""
    dt, N = tree.dt, tree.N
    sol = solve_linear_bsvie(tree, d, cfg)
    xs = solve_xi(tree, d, a, cfg)
    rows = len(d.psi)
    lhs = dt * sum(pair_leaves(d.psi[i], xs.xi[i]) for i in range(rows))
    rhs = dt * sum(pair_leaves(sol.Y[i], a.alpha[i]) for i in range(rows))
    rhs += dt * dt * sum(pair_leaves(sol.Z[i, j], a.beta[i, j])
                         for i in range(rows) for j in range(N))
    return DualityPair(lhs, rhs, sol, xs)


def corollary_specialization(tree: ScenarioTree, A0: KernelTable, C0: KernelTable,
                             phi: AdaptedProcess, psi: TerminalProcess):
    """Linear data whose adjoint equation is the forward equation driven by
    ``(A0, C0, phi)``: ``A(i,j) = A0(j,i)'`` and ``C(i,j) = C0(j,i)'`` for
    ``j > i`` (zero on and below the diagonal), ``B = 0``, ``alpha = phi``,
    ``beta = 0``."""
    N = tree.N
    A, C = zero_kernel(N), zero_kernel(N)
    for i in range(N):
        for j in range(i + 1, N):
            if A0[j][i] is not None:
                A[i][j] = tree.lift(np.swapaxes(A0[j][i], 1, 2), j)
            if C0[j][i] is not None:
                C[i][j] = tree.lift(np.swapaxes(C0[j][i], 1, 2), j)
    d = LinearBSVIEData(A, zero_kernel(N), C, psi)
    alpha = AdaptedProcess(phi.values[:N])
    beta = VolterraField(tree, N, psi.dim, FULL_SQUARE)
    return d, AdjointData(alpha, beta)


def eval_corollary_duality(tree: ScenarioTree, A0: KernelTable, C0: KernelTable,
                           phi: AdaptedProcess, psi: TerminalProcess,
                           cfg: Optional[SolverConfig] = None) -> DualityPair:
    """``dt sum E<psi_i, X_i>`` against ``dt sum E<phi_i, p_i>``.

    ``X`` solves the linear forward equation; ``(p, q)`` is the M-solution of
    ``p_i = psi_i + sum_{j>i} [A0(j,i)' p_j + C0(j,i)' q(j,i)] dt - sum_{j>=i} q(i,j) dW_j``.
    """
    dt, N = tree.dt, tree.N
    rows = len(psi)
    X = solve_linear_fsvie(tree, A0, C0, AdaptedProcess(phi.values[:rows])).X

    def g(i, r, y, z, zp):
        out = np.zeros_like(z)
        if r > i:
            if A0[r][i] is not None:
                out += matvec(A0[r][i], y, transpose=True)
            if C0[r][i] is not None:
                out += matvec(C0[r][i], zp, transpose=True)
        return out

    uses = any(C0[r][i] is not None for r in range(N) for i in range(r))
    sol = solve_bsvie_msolution(tree, GeneratorSpec(psi, g, uses), cfg)
    lhs = dt * sum(pair_leaves(psi[i], X[i]) for i in range(rows))
    rhs = dt * sum(pair_leaves(phi[i], sol.Y[i]) for i in range(rows))
    return DualityPair(lhs, rhs, sol, None)


def random_kernel(tree: ScenarioTree, dim: int, rng: np.random.Generator, scale: float,
                  lower: bool = False) -> KernelTable:
    """Bounded adapted matrix kernel; ``lower`` keeps only ``j < i``."""
    N = tree.N
    out = zero_kernel(N + 1) if lower else zero_kernel(N)
    for i in range(len(out)):
        for j in range(N):
            if lower and j >= i:
                continue
            out[i][j] = rng.uniform(-scale, scale, (2 ** j, dim, dim))
    if not lower:
        out = [row[:N] for row in out]
    return out


def random_linear_instance(tree: ScenarioTree, m: int, seed: int, scale: float = 0.5):
    """Seeded bounded instance ``(LinearBSVIEData, AdjointData)``."""
    rng = np.random.default_rng(seed)
    N = tree.N
    A = random_kernel(tree, m, rng, scale)
    B = random_kernel(tree, m, rng, scale)
    C = random_kernel(tree, m, rng, scale)
    psi = TerminalProcess(rng.standard_normal((N, tree.n_leaves, m)))
    alpha = AdaptedProcess([rng.standard_normal((2 ** k, m)) for k in range(N)])
    beta = VolterraField(tree, N, m, FULL_SQUARE,
                         [[rng.standard_normal((2 ** j, m)) for j in range(N)] for _ in range(N)])
    return LinearBSVIEData(A, B, C, psi), AdjointData(alpha, beta)


def random_corollary_instance(tree: ScenarioTree, n: int, seed: int, scale: float = 0.5):
    """Seeded ``(A0, C0, phi, psi)`` with lower-triangular kernels."""
    rng = np.random.default_rng(seed)
    N = tree.N
    A0 = random_kernel(tree, n, rng, scale, lower=True)
    C0 = random_kernel(tree, n, rng, scale, lower=True)
    phi = AdaptedProcess([rng.standard_normal((2 ** k, n)) for k in range(N)])
    psi = TerminalProcess(rng.standard_normal((N, tree.n_leaves, n)))
    return A0, C0, phi, psi
