import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsvie.coefficients import (Box, FunctionKernel, ParameterError, Poly, builtin_family,
                                 project_onto_U, validate_derivatives)

from instances import lq_params


def probe(c, seed=0, P=5):
    rng = np.random.default_rng(seed)
    x, u = rng.standard_normal((P, c.n)), rng.standard_normal((P, c.l))
    y, z = rng.standard_normal((P, c.m)), rng.standard_normal((P, c.m))
    return x, u, y, z


def test_zero_family_is_zero():
    c = builtin_family("zero", {})
    x, u, y, z = probe(c)
    assert np.all(c.b(0.3, 0.1, x, u) == 0)
    assert np.all(c.g(0.3, 0.1, x, x, y, z, z, u) == 0)
    assert np.all(c.h(x, y) == 0)
    assert np.all(c.f.partial("u", 0.2, 0.1, x, y, z, u) == 0)
    assert np.all(c.phi_at(0.7) == 0)
    assert validate_derivatives(c).worst == 0.0


def test_linear_family_identity_derivative():
    c = builtin_family("linear_volterra", {"b": {"x": 1.0}})
    x, u, _, _ = probe(c)
    np.testing.assert_array_equal(c.b.partial("x", 0.5, 0.2, x, u), np.ones((5, 1, 1)))
    np.testing.assert_array_equal(c.b.partial("u", 0.5, 0.2, x, u), np.zeros((5, 1, 1)))
    np.testing.assert_allclose(c.b(0.5, 0.2, x, u), x)


def test_lq_control_cost_gradient():
    c = builtin_family("lq_tracking", {"f": {"uu": 1.0}})
    x, u, y, z = probe(c)
    np.testing.assert_allclose(c.f.partial("u", 0.1, 0.0, x, y, z, u), 2 * u)
    np.testing.assert_allclose(c.f(0.1, 0.0, x, y, z, u), u[:, 0] ** 2)


def test_polynomial_time_dependence():
    p = Poly.parse({"1": 1.0, "t": 2.0, "ss": 3.0, "ts": -1.0}, (), "k")
    assert p(0.5, 2.0) == pytest.approx(1 + 1.0 + 12.0 - 1.0)
    c = builtin_family("linear_volterra", {"phi": {"t": 1.0}})
    assert c.phi_at(0.25)[0] == pytest.approx(0.25)


@pytest.mark.parametrize("family", ["linear_volterra", "lq_tracking"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_polynomial_families_pass_derivative_check(family, seed):
    params = lq_params(seed, kind="C2")
    if family == "linear_volterra":
        params["h"] = {k: params["h"][k] for k in ("x", "y")}
        params["f"] = {k: params["f"][k] for k in ("x", "y", "z", "u")}
    c = builtin_family(family, params)
    fine = validate_derivatives(c, probes=8, step=1e-4, seed=seed)
    assert fine.passed, fine.failed
    # exact for affine and quadratic maps up to roundoff, seen at a large step
    coarse = validate_derivatives(c, probes=8, step=0.5, seed=seed)
    assert coarse.worst <= 1e-12


def test_saturated_family_derivatives():
    c = builtin_family("tanh_volterra", lq_params(4, kind="C2", kappa=0.7))
    report = validate_derivatives(c, probes=16, step=1e-4)
    assert report.passed, report.failed
    assert report.worst > 0


def test_uses_zprime_flag():
    assert not builtin_family("linear_volterra", {"g": {"y": 1.0}}).uses_zprime
    assert builtin_family("linear_volterra", {"g": {"zp": 1.0}}).uses_zprime


def test_c1_style_generator_ignores_zprime():
    c = builtin_family("lq_tracking", lq_params(3, kind="C1"))
    x, u, y, z = probe(c)
    a = c.g(0.2, 0.4, x, x, y, z, z, u)
    b = c.g(0.2, 0.4, x, x, y, z, z + 5.0, u)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("name,params,key", [
    ("nope", {}, "family"),
    ("linear_volterra", {"b": {"w": 1.0}}, "params.b.w"),
    ("linear_volterra", {"h": {"xx": 1.0}}, "params.h.xx"),
    ("linear_volterra", {"b": {"x": [1.0, 2.0]}}, "params.b.x"),
    ("linear_volterra", {"b": {"x": {"q": 1.0}}}, "params.b.x.q"),
    ("lq_tracking", {"n": 0}, "params.n"),
    ("lq_tracking", {"control": {"lo": 1.0, "hi": 2.0}}, "params.control"),
    ("linear_volterra", {"g": {"kappa": 1.0}}, "params.g.kappa"),
])
def test_malformed_tables_name_the_key(name, params, key):
    with pytest.raises(ParameterError) as err:
        builtin_family(name, params)
    assert err.value.key == key


def test_function_kernel_requires_partials():
    with pytest.raises(ValueError):
        FunctionKernel("h", ("x", "y"), 0, None, lambda x, y: x[:, 0], {"x": lambda x, y: x})


def test_project_examples():
    box = Box.symmetric(2)
    np.testing.assert_array_equal(project_onto_U([2.0, -3.0], box), [1.0, -1.0])
    v = np.array([0.3, -0.2])
    np.testing.assert_array_equal(project_onto_U(v, box), v)
    assert len(box.vertices()) == 4


def test_box_validation():
    with pytest.raises(ValueError):
        Box(np.array([1.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        Box(np.zeros(2), np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(0, 10 ** 6))
def test_projection_is_idempotent_and_nearest(v, seed):
    box = Box(np.array([-1.0, 0.0, -0.5]), np.array([1.0, 2.0, 0.5]))
    v = np.array(v)
    pv = project_onto_U(v, box)
    assert box.contains(pv)
    np.testing.assert_array_equal(project_onto_U(pv, box), pv)
    w = np.random.default_rng(seed).uniform(box.lo, box.hi, (100, 3))
    assert np.all(np.linalg.norm(pv - v) <= np.linalg.norm(w - v, axis=1) + 1e-12)
