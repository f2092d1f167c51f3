import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsvie.coefficients import Box, builtin_family
from fbsvie.control import (ControlProblem, NoDescent, OptimizerConfig, adapted_projection,
                            bsde_backward, bsde_forward, directional_derivative_variational, eval_cost,
                            eval_J, eval_J1, eval_J2, fd_directional_derivative, gradient_check,
                            lemma52_check, linearize, mp_gradient, pairing,
                            projected_gradient_optimize, random_control, solve_adjoint_bundle,
                            solve_state, solve_variational, stationarity_residual)
from fbsvie.lattice import AdaptedProcess, ScenarioTree

from instances import control_pair, lq_problem
from oracles import Paths, straight_line_cost


def problem(kind, params, steps=3, family="linear_volterra"):
    return ControlProblem(kind, builtin_family(family, params), ScenarioTree.build(steps, 1.0))


def const_control(p, value):
    return AdaptedProcess([np.full((2 ** k, p.coefficients.l), value) for k in range(p.tree.N)])


@pytest.mark.parametrize("kind,expected", [("C1", 0.75), ("C2", 1.0)])
def test_unit_running_cost_counts_pairs(kind, expected):
    p = problem(kind, {"f": {"0": 1.0}}, steps=2)
    assert eval_J(p, const_control(p, 0.0)) == pytest.approx(expected)


@pytest.mark.parametrize("kind", ["C1", "C2"])
def test_zero_family_cost_is_zero(kind):
    p = problem(kind, {}, family="zero")
    assert eval_J(p, random_control(p.tree, p.box, 0)) == 0.0


def test_kind_specific_cost_entry_points():
    p1, p2 = problem("C1", {}), problem("C2", {})
    u = const_control(p1, 0.0)
    assert eval_J1(p1, u) == 0.0 and eval_J2(p2, u) == 0.0
    with pytest.raises(ValueError):
        eval_J2(p1, u)
    with pytest.raises(ValueError):
        eval_J1(p2, u)


def test_c1_rejects_zprime_generator():
    with pytest.raises(ValueError):
        problem("C1", {"g": {"zp": 1.0}})
    with pytest.raises(ValueError):
        problem("C3", {})


def test_control_outside_box_is_rejected():
    p = problem("C1", {"f": {"uu": 1.0}}, family="lq_tracking")
    with pytest.raises(ValueError):
        projected_gradient_optimize(p, const_control(p, 2.0))


@pytest.mark.parametrize("kind", ["C1", "C2"])
@pytest.mark.parametrize("seed", [0, 1])
def test_cost_matches_straight_line_sum(kind, seed):
    p = lq_problem(seed, kind, steps=3)
    u = random_control(p.tree, p.box, seed)
    st = solve_state(p, u)
    ref = straight_line_cost(Paths(3), kind, p.coefficients, st.X, st.Y, st.Z, u)
    assert eval_cost(p, st) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("kind", ["C1", "C2"])
def test_variational_system_is_linear_in_direction(kind):
    p = lq_problem(3, kind, steps=3, family="tanh_volterra", kappa=0.4)
    u, v = control_pair(p, 0)
    _, w = control_pair(p, 1)
    assert solve_variational(p, u, u).X1.max_abs() == 0.0
    assert directional_derivative_variational(p, u, u) == 0.0
    da = directional_derivative_variational(p, u, v)
    db = directional_derivative_variational(p, u, w)
    mix = AdaptedProcess([u[k] + 0.5 * (v[k] - u[k]) - 2.0 * (w[k] - u[k]) for k in range(3)])
    dm = directional_derivative_variational(p, u, mix)
    # agreement is limited by the Picard stopping tolerance
    assert dm == pytest.approx(0.5 * da - 2.0 * db, abs=1e-9)


@pytest.mark.parametrize("kind,count", [("C1", lambda j, N: j + 1), ("C2", lambda j, N: N)])
def test_control_only_cost_gradient_formula(kind, count):
    p = problem(kind, {"f": {"uu": 1.0}}, steps=3, family="lq_tracking")
    u = random_control(p.tree, p.box, 4)
    G = mp_gradient(p, u)
    N, dt = 3, p.tree.dt
    for j in range(N):
        np.testing.assert_allclose(G[j], p.tree.lift(2 * u[j] * count(j, N) * dt), atol=1e-14)


def test_adjoint_bundle_vanishes_without_costs():
    p = problem("C2", {"b": {"x": 0.5}, "g": {"y": 0.3, "zp": 0.2}})
    u = random_control(p.tree, p.box, 1)
    b = solve_adjoint_bundle(p, u)
    assert b.xi.xi.data.max() == 0.0 and b.xi.xi.data.min() == 0.0
    assert b.p.max_abs() == 0.0 and float(np.max(np.abs(b.terminal))) == 0.0
    assert float(np.max(np.abs(mp_gradient(p, u, b).data))) == 0.0


def test_pairing_only_sees_adapted_projection():
    p = lq_problem(2, "C2", steps=4)
    u, v = control_pair(p, 2)
    G = mp_gradient(p, u)
    d = v - u
    assert pairing(p.tree, G, d) == pytest.approx(
        pairing(p.tree, adapted_projection(p.tree, G), d), abs=1e-13)


@pytest.mark.parametrize("kind", ["C1", "C2"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_three_derivatives_agree_on_quadratic_costs(kind, seed):
    p = lq_problem(seed, kind, steps=4)
    u, v = control_pair(p, seed)
    chk = gradient_check(p, u, v, eps=0.1)
    errs = chk.errors()
    assert errs["variational_vs_adjoint"] <= 1e-8
    # affine dynamics with quadratic costs: central differences are exact
    assert errs["central_vs_adjoint"] <= 1e-9


@pytest.mark.parametrize("kind", ["C1", "C2"])
def test_saturated_dynamics_gradient_agrees(kind):
    p = lq_problem(5, kind, steps=4, family="tanh_volterra", kappa=0.5)
    u, v = control_pair(p, 3)
    chk = gradient_check(p, u, v, eps=1e-4)
    assert chk.errors()["variational_vs_adjoint"] <= 1e-8
    assert chk.errors()["central_vs_adjoint"] <= 1e-6


@pytest.mark.parametrize("kind", ["C1", "C2"])
def test_finite_difference_error_is_second_order(kind):
    p = lq_problem(7, kind, steps=4, family="tanh_volterra", kappa=0.5)
    u, v = control_pair(p, 0)
    st = solve_state(p, u)
    lin = linearize(p, st)
    G = mp_gradient(p, u, st=st, lin=lin)
    exact = pairing(p.tree, G, v - u)
    errs = [abs(fd_directional_derivative(p, u, v, e) - exact) for e in (0.2, 0.1, 0.05)]
    for a, b in zip(errs, errs[1:]):
        assert 3.0 < a / b < 5.0


def test_one_sided_difference_on_the_boundary():
    p = problem("C1", {"f": {"uu": 1.0}}, steps=2, family="lq_tracking")
    u = const_control(p, 1.0)
    v = const_control(p, 0.0)
    # u - eps d leaves the box, so the forward quotient (J(u + eps d) - J(u)) / eps is used
    J0 = eval_J(p, u)
    fd = fd_directional_derivative(p, u, v, 0.1)
    d = AdaptedProcess([u[k] + 0.1 * (v[k] - u[k]) for k in range(2)])
    assert fd == pytest.approx((eval_J(p, d) - J0) / 0.1)
    with pytest.raises(ValueError):
        fd_directional_derivative(p, u, v, 0.0)


def test_stationarity_residual_examples():
    p = problem("C1", {}, steps=1)
    box = p.box
    u = AdaptedProcess([np.array([[1.0]])])
    assert stationarity_residual(box, AdaptedProcess([np.array([[-1.0]])]), u) == 0.0
    assert stationarity_residual(box, AdaptedProcess([np.array([[1.0]])]), u) == pytest.approx(2.0)
    mid = AdaptedProcess([np.array([[0.0]])])
    assert stationarity_residual(box, AdaptedProcess([np.array([[0.5]])]), mid) == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2),
       st.lists(st.floats(-1, 1), min_size=2, max_size=2))
def test_stationarity_residual_matches_vertex_enumeration(g, u):
    box = Box.symmetric(2)
    g, u = np.array([g]), np.array([u])
    brute = max(max(0.0, -float(g[0] @ (vert - u[0]))) for vert in box.vertices())
    assert stationarity_residual(box, AdaptedProcess([g]), AdaptedProcess([u])) == \
        pytest.approx(brute, abs=1e-12)


@pytest.mark.parametrize("kind", ["C1", "C2"])
def test_optimizer_finds_interior_minimum(kind):
    p = problem(kind, {"f": {"uu": 1.0}}, steps=3, family="lq_tracking")
    res = projected_gradient_optimize(p, random_control(p.tree, p.box, 3))
    assert res.converged
    assert max(float(np.max(np.abs(res.u[k]))) for k in range(3)) < 1e-3
    Js = [h["J"] for h in res.history]
    assert all(b <= a + 1e-15 for a, b in zip(Js, Js[1:]))


def test_optimizer_clamps_at_the_boundary():
    p = problem("C2", {"f": {"uu": 1.0, "u_ref": 2.0}}, steps=3, family="lq_tracking")
    res = projected_gradient_optimize(p, const_control(p, 0.0))
    assert res.converged
    for k in range(3):
        np.testing.assert_allclose(res.u[k], 1.0)


def test_optimizer_stops_immediately_at_optimum():
    p = problem("C1", {"f": {"uu": 1.0}}, steps=3, family="lq_tracking")
    res = projected_gradient_optimize(p, const_control(p, 0.0))
    assert res.converged and len(res.history) == 1 and res.J == 0.0


@pytest.mark.parametrize("kind", ["C1", "C2"])
def test_optimizer_decreases_cost_on_coupled_problem(kind):
    p = lq_problem(1, kind, steps=3)
    start = random_control(p.tree, p.box, 8)
    res = projected_gradient_optimize(p, start, OptimizerConfig(max_iters=15))
    Js = [h["J"] for h in res.history]
    assert Js[-1] < Js[0]
    assert all(b <= a + 1e-12 for a, b in zip(Js, Js[1:]))


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(shrink=1.5)
    assert issubclass(NoDescent, RuntimeError)


def test_bsde_round_trip_hand_example():
    tree = ScenarioTree.build(3, 1.0)
    ones = AdaptedProcess([np.ones((2 ** k, 1)) for k in range(3)])
    zero = lambda k, z: np.zeros_like(z)
    xi = bsde_forward(tree, [0.0], ones, zero)
    np.testing.assert_allclose(xi[:, 0], tree.brownian(3))
    rep = lemma52_check(tree, xi, [0.0], ones, zero)
    assert rep.passed and rep.eta_error <= 1e-14


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(0, 10 ** 6))
def test_bsde_round_trip_is_exact(N, seed):
    tree = ScenarioTree.build(N)
    rng = np.random.default_rng(seed)
    zeta = AdaptedProcess([rng.standard_normal((2 ** k, 2)) for k in range(N)])
    eta0 = rng.standard_normal(2)
    g0 = lambda k, z: np.sin(z) + 0.1 * k * z ** 2
    xi = bsde_forward(tree, eta0, zeta, g0)
    assert lemma52_check(tree, xi, eta0, zeta, g0, tol=1e-10).passed


def test_bsde_backward_detects_wrong_guess():
    tree = ScenarioTree.build(2)
    zero = lambda k, z: np.zeros_like(z)
    ones = AdaptedProcess([np.ones((2 ** k, 1)) for k in range(2)])
    xi = bsde_forward(tree, [1.0], ones, zero)
    eta, zeta = bsde_backward(tree, xi, zero)
    assert eta[0] == pytest.approx(1.0)
    assert not lemma52_check(tree, xi, [0.0], ones, zero).passed
