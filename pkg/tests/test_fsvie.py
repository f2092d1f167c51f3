import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsvie.coefficients import builtin_family
from fbsvie.control import random_control
from fbsvie.duality import random_corollary_instance, random_kernel
from fbsvie.fsvie import solve_fsvie, solve_linear_fsvie
from fbsvie.lattice import AdaptedProcess, NonFiniteValue, ScenarioTree

from oracles import Paths, dense_linear_fsvie, euler_sde


def zero_control(tree, l=1):
    return AdaptedProcess.zeros(tree.N, l)


def test_zero_family_gives_zero_state():
    tree = ScenarioTree.build(4)
    c = builtin_family("zero", {})
    X = solve_fsvie(tree, c, random_control(tree, c.control_set, 0)).X
    assert X.max_abs() == 0.0
    assert len(X) == 5


def test_hand_unrolled_recursion():
    tree = ScenarioTree.build(2, 1.0)
    c = builtin_family("linear_volterra", {"phi": 1.0, "b": {"x": 1.0}})
    X = solve_fsvie(tree, c, zero_control(tree)).X
    np.testing.assert_allclose(X[0], [[1.0]])
    np.testing.assert_allclose(X[1], [[1.5]] * 2)
    np.testing.assert_allclose(X[2], [[2.25]] * 4)


def test_pure_noise_is_brownian_motion():
    tree = ScenarioTree.build(5, 2.0)
    c = builtin_family("linear_volterra", {"sigma": {"0": 1.0}})
    X = solve_fsvie(tree, c, zero_control(tree)).X
    for i in range(6):
        np.testing.assert_allclose(X[i][:, 0], tree.brownian(i), atol=1e-14)


def test_memory_effect_of_outer_time():
    # b depends on its first time argument, so each X_i re-weights the whole past
    tree = ScenarioTree.build(3, 1.0)
    c = builtin_family("linear_volterra", {"phi": 1.0, "b": {"x": {"t": 1.0}}})
    X = solve_fsvie(tree, c, zero_control(tree)).X
    h = 1 / 3
    x1 = 1 + h * 1.0 * h
    x2 = 1 + 2 * h * (1.0 + x1) * h
    np.testing.assert_allclose(X[1][0, 0], x1)
    np.testing.assert_allclose(X[2][0, 0], x2)


def test_linear_zero_kernels_return_phi():
    tree = ScenarioTree.build(3)
    _, _, phi, _ = random_corollary_instance(tree, 2, 0)
    none = [[None] * 3 for _ in range(4)]
    X = solve_linear_fsvie(tree, none, none, phi).X
    for i in range(3):
        np.testing.assert_array_equal(X[i], phi[i])


def test_linear_matches_general_solver():
    tree = ScenarioTree.build(3, 1.0)
    c = builtin_family("linear_volterra", {"phi": 1.0, "b": {"x": 1.0}})
    A0 = [[np.ones((2 ** j, 1, 1)) if j < i else None for j in range(3)] for i in range(4)]
    none = [[None] * 3 for _ in range(4)]
    phi = AdaptedProcess.constant(4, [1.0])
    lin = solve_linear_fsvie(tree, A0, none, phi).X
    gen = solve_fsvie(tree, c, zero_control(tree)).X
    for i in range(4):
        np.testing.assert_allclose(lin[i], gen[i], atol=1e-14)


def test_linear_matches_dense_oracle():
    tree = ScenarioTree.build(6, 1.0)
    rng = np.random.default_rng(5)
    A0 = random_kernel(tree, 1, rng, 0.8, lower=True)
    C0 = random_kernel(tree, 1, rng, 0.8, lower=True)
    phi = AdaptedProcess([rng.standard_normal((2 ** k, 1)) for k in range(7)])
    X = solve_linear_fsvie(tree, A0, C0, phi).X
    ref = dense_linear_fsvie(Paths(6), A0, C0, phi.values)
    for i in range(7):
        np.testing.assert_allclose(tree.lift(X[i]), ref[i], atol=1e-10)


def test_memoryless_data_reduces_to_euler_sde():
    tree = ScenarioTree.build(6, 1.0)
    params = {"phi": 0.3,
              "b": {"x": {"1": -0.5, "s": 0.4}, "0": {"s": 1.0}, "kappa": 0.6},
              "sigma": {"x": {"1": 0.2, "ss": 0.5}, "0": 0.3, "kappa": -0.4}}
    c = builtin_family("tanh_volterra", params)
    X = solve_fsvie(tree, c, zero_control(tree)).X

    def sat(lin, kappa):
        return lin + kappa * np.tanh(lin)

    b = lambda t, x: sat((-0.5 + 0.4 * t) * x + t, 0.6)
    sig = lambda t, x: sat((0.2 + 0.5 * t * t) * x + 0.3, -0.4)
    ref = euler_sde(Paths(6), np.array([0.3]), b, sig)
    for i in range(7):
        np.testing.assert_allclose(tree.lift(X[i]), ref[i], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10 ** 6))
def test_linear_solution_is_additive_in_phi(N, seed):
    tree = ScenarioTree.build(N)
    rng = np.random.default_rng(seed)
    A0 = random_kernel(tree, 2, rng, 0.5, lower=True)
    C0 = random_kernel(tree, 2, rng, 0.5, lower=True)
    p1 = AdaptedProcess([rng.standard_normal((2 ** k, 2)) for k in range(N + 1)])
    p2 = AdaptedProcess([rng.standard_normal((2 ** k, 2)) for k in range(N + 1)])
    s = solve_linear_fsvie(tree, A0, C0, p1 + p2).X
    a = solve_linear_fsvie(tree, A0, C0, p1).X
    b = solve_linear_fsvie(tree, A0, C0, p2).X
    assert (s - (a + b)).max_abs() < 1e-12


def test_control_perturbation_is_second_order_in_mean_square():
    tree = ScenarioTree.build(4)
    params = {"phi": 0.5, "b": {"x": 0.7, "u": 1.0, "kappa": 0.5},
              "sigma": {"x": 0.3, "u": 0.6, "kappa": 0.5}}
    c = builtin_family("tanh_volterra", params)
    u = random_control(tree, c.control_set, 1, 0.5)
    d = random_control(tree, c.control_set, 2, 0.5)
    base = solve_fsvie(tree, c, u).X

    def gap(delta):
        X = solve_fsvie(tree, c, u + d * delta).X
        return max(float(np.mean((X[i] - base[i]) ** 2)) for i in range(tree.N + 1))

    r1, r2 = gap(0.1) / gap(0.05), gap(0.05) / gap(0.025)
    assert 3.0 < r1 < 5.0 and 3.0 < r2 < 5.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_is_reported():
    tree = ScenarioTree.build(3)
    c = builtin_family("linear_volterra", {"phi": 1e300, "b": {"x": 1e300}})
    with pytest.raises(NonFiniteValue):
        solve_fsvie(tree, c, zero_control(tree))
