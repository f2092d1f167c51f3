"""Optimal control of the forward-backward Volterra system on the tree.

Two problem kinds share the state equation

    X_i = phi(t_i) + sum_{j<i} b(t_i, t_j, X_j, u_j) dt + sigma(...) dW_j
    Y_i = psi(t_i, X_i, X_N) + sum_{j>=i} g(t_i, t_j, X_i, X_j, Y_j, Z(i,j), Z(j,i), u_j) dt
          - sum_{j>=i} Z(i,j) dW_j

and differ in the cost and in the notion of solution:

* ``C1``: adapted solution (g ignores z'),
  ``J1 = E h(X_N, Y_0) + dt^2 sum_{i<=j} E f(t_i, t_j, X_j, Y_j, Z(i,j), u_j)``.
* ``C2``: M-solution,
  ``J2 = E h(X_N, sum_i E[Y_i] dt) + dt^2 sum_{i,j} E f(...)``.

The derivative of ``J`` in the direction ``d = v - u`` is computed three
ways: from the linearized (variational) system, from the adjoint bundle as
``dt sum_j E<G_j, d_j>``, and by finite differences of ``J``. The adjoint
route is the exact discrete transpose of the variational route.

The (p, q) equation uses ``b_x, sigma_x`` as its kernels; with ``b_u``
there the adjoint pairing no longer matches the variational derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bsvie import (GeneratorSpec, SolverConfig, solve_bsvie_adapted,
                    solve_bsvie_msolution)
from .coefficients import Box, CoefficientSet, project_onto_U
from .duality import AdjointData, LinearBSVIEData, XiSolution, solve_xi, zero_kernel
from .fsvie import solve_fsvie
from .lattice import (FULL_SQUARE, AdaptedProcess, ScenarioTree, TerminalProcess,
                      VolterraField, matvec)

KINDS = ("C1", "C2")


class NoDescent(RuntimeError):
    """Backtracking reached its step floor without sufficient decrease."""


@dataclass
class ControlProblem:
    kind: str
    coefficients: CoefficientSet
    tree: ScenarioTree
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "C1" and self.coefficients.uses_zprime:
            raise ValueError("problem C1 needs a generator without the z' slot")

    @property
    def msolution(self) -> bool:
        return self.kind == "C2"

    @property
    def box(self) -> Box:
        return self.coefficients.control_set

    def cost_pairs(self):
        """Outer/inner index pairs entering the running cost."""
        N = self.tree.N
        lo = (lambda i: i) if self.kind == "C1" else (lambda i: 0)
        return [(i, j) for i in range(N) for j in range(lo(i), N)]

    def outer_indices(self, j: int):
        """Outer indices ``i`` with ``(i, j)`` in the running-cost domain."""
        return range(j + 1) if self.kind == "C1" else range(self.tree.N)


@dataclass
class StateTuple:
    X: AdaptedProcess
    Y: AdaptedProcess
    Z: VolterraField
    u: AdaptedProcess
    iterations: int = 0
    residual: float = 0.0


def _zprime(p: ControlProblem, Z: VolterraField, i: int, r: int, like: np.ndarray) -> np.ndarray:
    if p.msolution:
        return p.tree.lift(Z[r, i], r)
    return np.zeros_like(like)


def check_control(p: ControlProblem, u: AdaptedProcess, atol: float = 1e-12):
    if len(u) < p.tree.N or u.dim != p.coefficients.l:
        raise ValueError("control must have N entries of dimension l")
    for k in range(p.tree.N):
        if not p.box.contains(u[k], atol):
            raise ValueError(f"control leaves the box at index {k}")


def solve_state(p: ControlProblem, u: AdaptedProcess) -> StateTuple:
    tree, c = p.tree, p.coefficients
    N = tree.N
    X = solve_fsvie(tree, c, u).X
    xN = X[N]
    psi = np.stack([c.psi(tree.time(i), tree.lift(X[i]), xN) for i in range(N + 1)])

    def g(i, r, y, z, zp):
        return c.g(tree.time(i), tree.time(r), tree.lift(X[i], r), X[r], y, z, zp, u[r])

    spec = GeneratorSpec(TerminalProcess(psi), g, p.msolution and c.uses_zprime)
    if p.msolution:
        sol = solve_bsvie_msolution(tree, spec, p.solver)
    else:
        sol = solve_bsvie_adapted(tree, spec, p.solver)
    return StateTuple(X, sol.Y, sol.Z, u, sol.iterations, sol.residual)


def _terminal_y(p: ControlProblem, Y: AdaptedProcess) -> np.ndarray:
    tree = p.tree
    if p.kind == "C1":
        y = Y[0][0]
    else:
        y = tree.dt * sum(tree.expect(Y[i]) for i in range(tree.N))
    return np.tile(y, (tree.n_leaves, 1))


def eval_cost(p: ControlProblem, st: StateTuple) -> float:
    tree, c = p.tree, p.coefficients
    N, dt = tree.N, tree.dt
    total = float(np.mean(c.h(st.X[N], _terminal_y(p, st.Y))))
    for i, j in p.cost_pairs():
        val = c.f(tree.time(i), tree.time(j), st.X[j], st.Y[j], st.Z[i, j], st.u[j])
        total += float(np.mean(val)) * dt * dt
    return total


def eval_J(p: ControlProblem, u: AdaptedProcess) -> float:
    return eval_cost(p, solve_state(p, u))


def eval_J1(p: ControlProblem, u: AdaptedProcess) -> float:
    if p.kind != "C1":
        raise ValueError("J1 belongs to problem C1")
    return eval_J(p, u)


def eval_J2(p: ControlProblem, u: AdaptedProcess) -> float:
    if p.kind != "C2":
        raise ValueError("J2 belongs to problem C2")
    return eval_J(p, u)


# -- linearization along a trajectory ------------------------------------------

@dataclass
class Linearization:
    """Partials along ``(X, Y, Z, u)``.

    ``b[slot][i][j]`` for ``j < i <= N`` and ``g[slot][i][r]`` for
    ``i <= r < N`` live on level ``j`` / ``r``; ``psi[slot][i]``, ``hx`` and
    ``hy`` are leaf arrays; ``f[slot][i][j]`` covers the running-cost domain.
    """

    b: dict
    sigma: dict
    g: dict
    psi: dict
    hx: np.ndarray
    hy: np.ndarray
    f: dict


def linearize(p: ControlProblem, st: StateTuple) -> Linearization:
    tree, c = p.tree, p.coefficients
    N = tree.N
    X, Y, Z, u = st.X, st.Y, st.Z, st.u
    t = tree.time

    def table(size):
        return [[None] * N for _ in range(size)]

    b = {s: table(N + 1) for s in ("x", "u")}
    sig = {s: table(N + 1) for s in ("x", "u")}
    for i in range(1, N + 1):
        for j in range(i):
            for s in ("x", "u"):
                b[s][i][j] = c.b.partial(s, t(i), t(j), X[j], u[j])
                sig[s][i][j] = c.sigma.partial(s, t(i), t(j), X[j], u[j])

    g = {s: table(N) for s in ("xp", "x", "y", "z", "zp", "u")}
    for i in range(N):
        for r in range(i, N):
            args = (t(i), t(r), tree.lift(X[i], r), X[r], Y[r], Z[i, r],
                    _zprime(p, Z, i, r, Z[i, r]), u[r])
            for s in g:
                g[s][i][r] = c.g.partial(s, *args)

    xN = X[N]
    psi = {s: [c.psi.partial(s, t(i), tree.lift(X[i]), xN) for i in range(N + 1)]
           for s in ("xp", "x")}
    yT = _terminal_y(p, Y)
    hx, hy = c.h.partial("x", xN, yT), c.h.partial("y", xN, yT)

    f = {s: table(N) for s in ("x", "y", "z", "u")}
    for i, j in p.cost_pairs():
        args = (t(i), t(j), X[j], Y[j], Z[i, j], u[j])
        for s in f:
            f[s][i][j] = c.f.partial(s, *args)
    return Linearization(b, sig, g, psi, hx, hy, f)


def _direction(p: ControlProblem, u_bar: AdaptedProcess, v: AdaptedProcess) -> AdaptedProcess:
    N = p.tree.N
    return AdaptedProcess([v[k] - u_bar[k] for k in range(N)])


# -- variational system -----------------------------------------------------------

@dataclass
class VariationalTuple:
    X1: AdaptedProcess
    Y1: AdaptedProcess
    Z1: VolterraField
    direction: AdaptedProcess


def solve_variational(p: ControlProblem, u_bar: AdaptedProcess, v: AdaptedProcess,
                      st: Optional[StateTuple] = None,
                      lin: Optional[Linearization] = None) -> VariationalTuple:
    """Linearized forward-backward system in the direction ``v - u_bar``."""
    tree, c = p.tree, p.coefficients
    N, dt = tree.N, tree.dt
    st = st or solve_state(p, u_bar)
    lin = lin or linearize(p, st)
    d = _direction(p, u_bar, v)

    xs = []
    for i in range(N + 1):
        x = np.zeros((2 ** i, c.n))
        for j in range(i):
            drift = (matvec(lin.b["x"][i][j], xs[j]) + matvec(lin.b["u"][i][j], d[j])) * dt
            diff = matvec(lin.sigma["x"][i][j], xs[j]) + matvec(lin.sigma["u"][i][j], d[j])
            x = x + tree.lift(drift, i) + tree.lift(tree.times_increment(diff, j), i)
        xs.append(x)
    X1 = AdaptedProcess(xs)

    gl = lin.g
    psi = []
    for i in range(N + 1):
        val = matvec(lin.psi["xp"][i], X1[i]) + matvec(lin.psi["x"][i], X1[N])
        for j in range(i, N):
            src = matvec(gl["xp"][i][j], X1[i]) + matvec(gl["x"][i][j], X1[j]) \
                + matvec(gl["u"][i][j], d[j])
            val = val + tree.lift(src * dt)
        psi.append(val)

    def gen(i, r, y, z, zp):
        out = matvec(gl["y"][i][r], y) + matvec(gl["z"][i][r], z)
        if p.msolution:
            out = out + matvec(gl["zp"][i][r], zp)
        return out

    spec = GeneratorSpec(TerminalProcess(np.stack(psi)), gen, p.msolution and c.uses_zprime)
    if p.msolution:
        sol = solve_bsvie_msolution(tree, spec, p.solver)
    else:
        sol = solve_bsvie_adapted(tree, spec, p.solver)
    return VariationalTuple(X1, sol.Y, sol.Z, d)


def directional_derivative_variational(p: ControlProblem, u_bar: AdaptedProcess,
                                       v: AdaptedProcess, st: Optional[StateTuple] = None,
                                       lin: Optional[Linearization] = None) -> float:
    tree = p.tree
    N, dt = tree.N, tree.dt
    st = st or solve_state(p, u_bar)
    lin = lin or linearize(p, st)
    var = solve_variational(p, u_bar, v, st, lin)
    total = float(np.mean(np.sum(lin.hx * var.X1[N], axis=1)))
    ehy = tree.expect(lin.hy)
    if p.kind == "C1":
        total += float(ehy @ var.Y1[0][0])
    else:
        total += float(ehy @ (dt * sum(tree.expect(var.Y1[i]) for i in range(N))))
    f = lin.f
    for i, j in p.cost_pairs():
        val = sum(np.sum(f[s][i][j] * a, axis=1) for s, a in
                  (("x", var.X1[j]), ("y", var.Y1[j]), ("z", var.Z1[i, j]), ("u", var.direction[j])))
        total += float(np.mean(val)) * dt * dt
    return total


# -- adjoint bundle and gradient ---------------------------------------------------

@dataclass
class AdjointBundle:
    lam: Optional[AdaptedProcess]
    xi: XiSolution
    mu: AdaptedProcess
    nu: AdaptedProcess
    p: AdaptedProcess
    q: VolterraField
    terminal: np.ndarray


def solve_adjoint_bundle(p: ControlProblem, u_bar: AdaptedProcess,
                         st: Optional[StateTuple] = None,
                         lin: Optional[Linearization] = None) -> AdjointBundle:
    tree, c = p.tree, p.coefficients
    N, dt = tree.N, tree.dt
    st = st or solve_state(p, u_bar)
    lin = lin or linearize(p, st)
    gl, fl = lin.g, lin.f
    ehy = tree.expect(lin.hy)

    lam = None
    if p.kind == "C1":
        vals = [ehy[None, :]]
        for k in range(N):
            step = tree.times_increment(matvec(gl["z"][0][k], vals[k], transpose=True), k)
            vals.append(np.repeat(vals[k], 2, axis=0) + step)
        lam = AdaptedProcess(vals)

    upper = lambda s: [[gl[s][i][j] if j >= i else None for j in range(N)] for i in range(N)]
    C = upper("zp") if p.msolution else zero_kernel(N)
    data = LinearBSVIEData(upper("y"), upper("z"), C, TerminalProcess.zeros(tree, N, c.m))

    alpha = []
    for j in range(N):
        a = sum(fl["y"][i][j] for i in p.outer_indices(j)) * dt
        if p.kind == "C1":
            a = a + matvec(gl["y"][0][j], lam[j], transpose=True)
        else:
            a = a + ehy
        alpha.append(np.broadcast_to(a, (2 ** j, c.m)).copy())
    beta = VolterraField(tree, N, c.m, FULL_SQUARE)
    for i, j in p.cost_pairs():
        beta[i, j] = fl["z"][i][j]
    xs = solve_xi(tree, data, AdjointData(AdaptedProcess(alpha), beta), p.solver)
    xi = xs.xi

    terminal = lin.hx.copy()
    if p.kind == "C1":
        terminal += matvec(lin.psi["x"][0], lam[N], transpose=True)
    for i in range(N):
        terminal += matvec(lin.psi["x"][i], xi[i], transpose=True) * dt
    _, nu = tree.martingale_repr(terminal)
    mu = AdaptedProcess([tree.cond_expect(terminal, k) for k in range(N + 1)])

    bx, sx = lin.b["x"], lin.sigma["x"]
    free = []
    for i in range(N):
        val = matvec(bx[N][i], terminal, transpose=True) \
            + tree.lift(matvec(sx[N][i], nu[i], transpose=True))
        if p.kind == "C1":
            val += tree.lift(matvec(gl["x"][0][i], lam[i], transpose=True))
        kern = lin.psi["xp"][i] + dt * sum(tree.lift(gl["xp"][i][j]) for j in range(i, N))
        val += matvec(kern, xi[i], transpose=True)
        for k in range(i + 1):
            val += matvec(gl["x"][k][i], xi[k], transpose=True) * dt
        val += tree.lift(sum(fl["x"][k][i] for k in p.outer_indices(i)) * dt)
        free.append(val)

    def gen(i, r, y, z, zp):
        if r == i:
            return np.zeros_like(z)
        return matvec(bx[r][i], y, transpose=True) + matvec(sx[r][i], zp, transpose=True)

    sol = solve_bsvie_msolution(tree, GeneratorSpec(TerminalProcess(np.stack(free)), gen, True),
                                p.solver)
    return AdjointBundle(lam, xs, mu, nu, sol.Y, sol.Z, terminal)


def mp_gradient(p: ControlProblem, u_bar: AdaptedProcess, bundle: Optional[AdjointBundle] = None,
                st: Optional[StateTuple] = None,
                lin: Optional[Linearization] = None) -> TerminalProcess:
    """Leaf-resolved integrand ``G_j`` with ``dJ = dt sum_j E<G_j, d_j>``."""
    tree, c = p.tree, p.coefficients
    N, dt = tree.N, tree.dt
    st = st or solve_state(p, u_bar)
    lin = lin or linearize(p, st)
    bundle = bundle or solve_adjoint_bundle(p, u_bar, st, lin)
    gl, fl = lin.g, lin.f
    bu, su = lin.b["u"], lin.sigma["u"]
    xi = bundle.xi.xi
    out = []
    for j in range(N):
        val = matvec(bu[N][j], bundle.terminal, transpose=True) \
            + tree.lift(matvec(su[N][j], bundle.nu[j], transpose=True))
        if p.kind == "C1":
            val += tree.lift(matvec(gl["u"][0][j], bundle.lam[j], transpose=True))
        val += tree.lift(sum(fl["u"][k][j] for k in p.outer_indices(j)) * dt)
        for k in range(j + 1):
            val += matvec(gl["u"][k][j], xi[k], transpose=True) * dt
        for i in range(j + 1, N):
            back = matvec(bu[i][j], bundle.p[i], transpose=True) \
                + tree.lift(matvec(su[i][j], bundle.q[i, j], transpose=True), i)
            val += tree.lift(back) * dt
        out.append(val)
    return TerminalProcess(np.stack(out))


def adapted_projection(tree: ScenarioTree, G: TerminalProcess) -> AdaptedProcess:
    """``E[G_s | F_s]`` for every index ``s``."""
    return G.project(tree)


def pairing(tree: ScenarioTree, G, d: AdaptedProcess) -> float:
    """``dt sum_j E<G_j, d_j>`` for leaf or node arrays ``G_j``."""
    total = 0.0
    for j in range(tree.N):
        gj = tree.lift(G[j])
        total += float(np.mean(np.sum(gj * tree.lift(d[j]), axis=1)))
    return total * tree.dt


def fd_directional_derivative(p: ControlProblem, u_bar: AdaptedProcess, v: AdaptedProcess,
                              eps: float) -> float:
    """Central difference of ``J`` along ``v - u_bar`` (one-sided if
    ``u_bar - eps d`` leaves the box)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    d = _direction(p, u_bar, v)
    shift = lambda s: AdaptedProcess([u_bar[k] + s * d[k] for k in range(p.tree.N)])
    plus = eval_J(p, shift(eps))
    back = shift(-eps)
    if all(p.box.contains(back[k], 1e-12) for k in range(p.tree.N)):
        return (plus - eval_J(p, back)) / (2.0 * eps)
    return (plus - eval_J(p, u_bar)) / eps


@dataclass
class GradientCheck:
    variational: float
    adjoint: float
    central: float

    @staticmethod
    def rel(a: float, b: float) -> float:
        return abs(a - b) / max(abs(a), abs(b), 1.0)

    def errors(self) -> dict:
        return {"variational_vs_adjoint": self.rel(self.variational, self.adjoint),
                "central_vs_variational": self.rel(self.central, self.variational),
                "central_vs_adjoint": self.rel(self.central, self.adjoint)}


def gradient_check(p: ControlProblem, u_bar: AdaptedProcess, v: AdaptedProcess,
                   eps: float = 0.1) -> GradientCheck:
    st = solve_state(p, u_bar)
    lin = linearize(p, st)
    dvar = directional_derivative_variational(p, u_bar, v, st, lin)
    G = mp_gradient(p, u_bar, st=st, lin=lin)
    dadj = pairing(p.tree, G, _direction(p, u_bar, v))
    return GradientCheck(dvar, dadj, fd_directional_derivative(p, u_bar, v, eps))


# -- optimizer -----------------------------------------------------------------

def stationarity_residual(box: Box, g: AdaptedProcess, u: AdaptedProcess) -> float:
    """``sum_{s, node} max_v max(0, -<g, v - u>)`` over box vertices ``v``.

    The maximum over vertices separates by component, so no enumeration is
    needed.
    """
    total = 0.0
    for gs, us in zip(g, u):
        worst = np.maximum(-gs * (box.lo - us), -gs * (box.hi - us))
        total += float(np.sum(np.maximum(np.sum(worst, axis=1), 0.0)))
    return total


@dataclass(frozen=True)
class OptimizerConfig:
    step: float = 1.0
    max_iters: int = 50
    stat_tol: float = 1e-6
    shrink: float = 0.5
    armijo: float = 1e-4
    min_step: float = 1e-12

    def __post_init__(self):
        if not (self.step > 0 and self.stat_tol > 0 and 0 < self.shrink < 1):
            raise ValueError("step, stat_tol must be positive and shrink in (0, 1)")


@dataclass
class OptimizeResult:
    u: AdaptedProcess
    J: float
    residual: float
    converged: bool
    history: list


def projected_gradient_optimize(p: ControlProblem, start: AdaptedProcess,
                                cfg: Optional[OptimizerConfig] = None) -> OptimizeResult:
    """Projected gradient with Armijo backtracking on ``J``."""
    cfg = cfg or OptimizerConfig()
    tree, box = p.tree, p.box
    check_control(p, start)
    u = AdaptedProcess([project_onto_U(start[k], box) for k in range(tree.N)])
    st = solve_state(p, u)
    J = eval_cost(p, st)
    history = []
    for it in range(cfg.max_iters + 1):
        G = adapted_projection(tree, mp_gradient(p, u, st=st))
        res = stationarity_residual(box, G, u)
        history.append({"iter": it, "J": J, "stationarity_residual": res})
        if res <= cfg.stat_tol:
            return OptimizeResult(u, J, res, True, history)
        if it == cfg.max_iters:
            break
        step = cfg.step
        while True:
            trial = AdaptedProcess([project_onto_U(u[k] - step * G[k], box) for k in range(tree.N)])
            st_new = solve_state(p, trial)
            J_new = eval_cost(p, st_new)
            slope = pairing(tree, G, trial - u)
            if J_new <= J + cfg.armijo * slope:
                break
            step *= cfg.shrink
            if step < cfg.min_step:
                raise NoDescent(f"no sufficient decrease at iteration {it}")
        history[-1]["step"] = step
        u, st, J = trial, st_new, J_new
    return OptimizeResult(u, J, history[-1]["stationarity_residual"], False, history)


# -- BSDE check ------------------------------------------------------------------

@dataclass
class RoundTripReport:
    eta_error: float
    zeta_error: float
    tol: float = 1e-10

    @property
    def passed(self) -> bool:
        return self.eta_error <= self.tol and self.zeta_error <= self.tol


def bsde_forward(tree: ScenarioTree, eta0, zeta0: AdaptedProcess,
                 g0: Callable[[int, np.ndarray], np.ndarray]) -> np.ndarray:
    """Terminal value ``xi = eta0 - sum g0(k, zeta0_k) dt + sum zeta0_k dW_k``."""
    eta = np.atleast_2d(np.asarray(eta0, dtype=float))
    for k in range(tree.N):
        eta = np.repeat(eta - g0(k, zeta0[k]) * tree.dt, 2, axis=0) \
            + tree.times_increment(zeta0[k], k)
    return eta


def bsde_backward(tree: ScenarioTree, xi: np.ndarray,
                  g0: Callable[[int, np.ndarray], np.ndarray]):
    """``eta_k = E_k eta_{k+1} + g0(k, zeta_k) dt``; returns ``(eta_0, zeta)``."""
    eta = np.atleast_2d(np.asarray(xi, dtype=float))
    if eta.shape[0] == 1 and tree.N:
        eta = np.tile(eta, (tree.n_leaves, 1))
    zetas = [None] * tree.N
    for k in range(tree.N - 1, -1, -1):
        up, dn = eta[0::2], eta[1::2]
        zetas[k] = (up - dn) / (2.0 * tree.sqrt_dt)
        eta = 0.5 * (up + dn) + g0(k, zetas[k]) * tree.dt
    return eta[0], AdaptedProcess(zetas)


def lemma52_check(tree: ScenarioTree, xi: np.ndarray, eta0, zeta0: AdaptedProcess,
                  g0: Callable[[int, np.ndarray], np.ndarray], tol: float = 1e-10) -> RoundTripReport:
    """Backward-solve the BSDE with terminal ``xi`` and compare with ``(eta0, zeta0)``."""
    eta, zeta = bsde_backward(tree, xi, g0)
    eta_err = float(np.max(np.abs(eta - np.asarray(eta0, dtype=float))))
    zeta_err = max((float(np.max(np.abs(zeta[k] - zeta0[k]))) for k in range(tree.N)), default=0.0)
    return RoundTripReport(eta_err, zeta_err, tol)


def random_control(tree: ScenarioTree, box: Box, seed: int, shrink: float = 1.0) -> AdaptedProcess:
    """Seeded adapted control, uniform in the box scaled towards its centre."""
    rng = np.random.default_rng(seed)
    mid, half = 0.5 * (box.lo + box.hi), 0.5 * (box.hi - box.lo) * shrink
    return AdaptedProcess([mid + half * rng.uniform(-1, 1, (2 ** k, box.dim)) for k in range(tree.N)])
