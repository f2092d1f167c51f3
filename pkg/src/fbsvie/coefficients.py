"""Problem data of the controlled FBSVIE and its cost functionals.

Every coefficient is a :class:`Kernel`: a vectorized callable taking its
time arguments as floats and its state/control arguments as ``(P, dim)``
arrays (one row per tree node), plus analytic partials in each state or
control slot. Vector kernels return ``(P, out)`` values and ``(P, out, dim)``
Jacobians; scalar kernels (``h``, ``f``) return ``(P,)`` values and
``(P, dim)`` row-vector gradients.

Slot names: ``x`` state, ``xp`` the state at the outer time (the x' slot),
``y``, ``z``, ``zp`` (the z' slot) and ``u``.

Built-in families read parameter tables whose leaves are polynomials of
degree <= 2 in ``(t, s)``: a number or nested list is a constant, and a dict
with keys among ``1, t, s, tt, ts, ss`` gives the coefficient of each
monomial. Single-time coefficients (``phi``, ``psi``) only see the ``t``
monomials; ``h`` is constant.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

BASIS = ("1", "t", "s", "tt", "ts", "ss")

FAMILIES = ("zero", "linear_volterra", "lq_tracking", "tanh_volterra")


class ParameterError(ValueError):
    """Malformed parameter table; ``key`` is the dotted path of the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _monomials(t: float, s: float) -> tuple:
    return (1.0, t, s, t * t, t * s, s * s)


class Poly:
    """Array-valued polynomial of degree <= 2 in ``(t, s)``."""

    def __init__(self, shape: tuple, terms: Optional[Mapping[str, np.ndarray]] = None):
        self.shape = tuple(shape)
        self.terms = {k: np.asarray(v, dtype=float) for k, v in (terms or {}).items()
                      if np.any(np.asarray(v) != 0)}

    @classmethod
    def parse(cls, spec, shape: tuple, key: str) -> "Poly":
        if spec is None:
            return cls(shape)
        raw = spec if isinstance(spec, Mapping) else {"1": spec}
        terms = {}
        for name, value in raw.items():
            if name not in BASIS:
                raise ParameterError(f"{key}.{name}", f"unknown monomial, expected one of {BASIS}")
            try:
                arr = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
            except (ValueError, TypeError) as exc:
                raise ParameterError(key, f"cannot read value as shape {shape}: {exc}") from None
            terms[name] = arr
        return cls(shape, terms)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def __call__(self, t: float = 0.0, s: float = 0.0) -> np.ndarray:
        out = np.zeros(self.shape)
        mono = dict(zip(BASIS, _monomials(t, s)))
        for name, coeff in self.terms.items():
            out = out + mono[name] * coeff
        return out


class Kernel:
    """Base class: ``args`` lists time arguments first, then state slots."""

    name: str = "kernel"
    args: tuple = ()
    n_time: int = 0
    out_dim: Optional[int] = None

    @property
    def slots(self) -> tuple:
        return self.args[self.n_time:]

    def __call__(self, *args) -> np.ndarray:
        raise NotImplementedError

    def partial(self, slot: str, *args) -> np.ndarray:
        raise NotImplementedError

    def _times(self, args):
        ts = tuple(args[:self.n_time]) + (0.0,) * (2 - self.n_time)
        return ts[0], ts[1], args[self.n_time:]


class AffineKernel(Kernel):
    """``lin + kappa * tanh(lin)`` with ``lin = const + sum_k M_k(t, s) a_k``."""

    def __init__(self, name: str, args: tuple, n_time: int, out_dim: int,
                 dims: Mapping[str, int], mats: Optional[Mapping[str, Poly]] = None,
                 const: Optional[Poly] = None, kappa: float = 0.0):
        self.name, self.args, self.n_time, self.out_dim = name, tuple(args), n_time, out_dim
        self.dims = dict(dims)
        self.mats = {k: v for k, v in (mats or {}).items() if not v.is_zero}
        self.const = const if const is not None else Poly((out_dim,))
        self.kappa = float(kappa)

    def _linear(self, t, s, states):
        rows = states[0].shape[0] if states else 1
        lin = np.broadcast_to(self.const(t, s), (rows, self.out_dim)).copy()
        for slot, a in zip(self.slots, states):
            mat = self.mats.get(slot)
            if mat is not None:
                lin += a @ mat(t, s).T
        return lin

    def __call__(self, *args):
        t, s, states = self._times(args)
        lin = self._linear(t, s, states)
        if self.kappa:
            return lin + self.kappa * np.tanh(lin)
        return lin

    def partial(self, slot, *args):
        t, s, states = self._times(args)
        rows = states[0].shape[0] if states else 1
        dim = self.dims[slot]
        mat = self.mats.get(slot)
        if mat is None:
            return np.zeros((rows, self.out_dim, dim))
        jac = np.broadcast_to(mat(t, s), (rows, self.out_dim, dim))
        if self.kappa:
            lin = self._linear(t, s, states)
            scale = 1.0 + self.kappa / np.cosh(lin) ** 2
            return scale[:, :, None] * jac
        return jac.copy()


class QuadraticKernel(Kernel):
    """Scalar ``sum_k (a_k - r_k)' Q_k (a_k - r_k) + sum_k l_k . a_k + c``."""

    def __init__(self, name: str, args: tuple, n_time: int, dims: Mapping[str, int],
                 quad: Optional[Mapping[str, tuple]] = None,
                 lin: Optional[Mapping[str, Poly]] = None, const: Optional[Poly] = None):
        self.name, self.args, self.n_time, self.out_dim = name, tuple(args), n_time, None
        self.dims = dict(dims)
        self.quad = {k: v for k, v in (quad or {}).items() if not v[0].is_zero}
        self.lin = {k: v for k, v in (lin or {}).items() if not v.is_zero}
        self.const = const if const is not None else Poly(())

    def __call__(self, *args):
        t, s, states = self._times(args)
        rows = states[0].shape[0]
        out = np.full(rows, float(self.const(t, s)))
        for slot, a in zip(self.slots, states):
            if slot in self.quad:
                q, ref = self.quad[slot]
                d = a - ref(t, s)
                out += np.einsum("pa,ab,pb->p", d, q(t, s), d)
            if slot in self.lin:
                out += a @ self.lin[slot](t, s)
        return out

    def partial(self, slot, *args):
        t, s, states = self._times(args)
        a = states[self.slots.index(slot)]
        grad = np.zeros_like(a, dtype=float)
        if slot in self.quad:
            q, ref = self.quad[slot]
            qm = q(t, s)
            grad += (a - ref(t, s)) @ (qm + qm.T).T
        if slot in self.lin:
            grad += self.lin[slot](t, s)
        return grad


class FunctionKernel(Kernel):
    """Kernel from plain callables, for problem data outside the built-ins."""

    def __init__(self, name: str, args: tuple, n_time: int, out_dim: Optional[int],
                 fn: Callable, partials: Mapping[str, Callable]):
        self.name, self.args, self.n_time, self.out_dim = name, tuple(args), n_time, out_dim
        self.fn = fn
        self.partials = dict(partials)
        missing = set(self.slots) - set(self.partials)
        if missing:
            raise ValueError(f"{name}: missing partials for {sorted(missing)}")

    def __call__(self, *args):
        return np.asarray(self.fn(*args), dtype=float)

    def partial(self, slot, *args):
        return np.asarray(self.partials[slot](*args), dtype=float)


B_ARGS = ("t", "s", "x", "u")
G_ARGS = ("t", "s", "xp", "x", "y", "z", "zp", "u")
PSI_ARGS = ("t", "xp", "x")
H_ARGS = ("x", "y")
F_ARGS = ("t", "s", "x", "y", "z", "u")


@dataclass(frozen=True)
class Box:
    """Control set ``prod_i [lo_i, hi_i]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have the same shape")
        if np.any(lo > hi):
            raise ValueError("box is empty (lo > hi)")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, dim: int, radius: float = 1.0) -> "Box":
        return cls(-radius * np.ones(dim), radius * np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def contains(self, v, atol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lo - atol) and np.all(v <= self.hi + atol))

    def vertices(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))))


def project_onto_U(v, box: Box) -> np.ndarray:
    """Euclidean projection onto the box (componentwise clamp)."""
    return np.clip(np.asarray(v, dtype=float), box.lo, box.hi)


@dataclass(frozen=True)
class CoefficientSet:
    n: int
    m: int
    l: int
    phi: Poly
    b: Kernel
    sigma: Kernel
    g: Kernel
    psi: Kernel
    h: Kernel
    f: Kernel
    control_set: Box
    family: str = "custom"
    params: Mapping = field(default_factory=dict)

    @property
    def kernels(self) -> dict:
        return {"b": self.b, "sigma": self.sigma, "g": self.g, "psi": self.psi,
                "h": self.h, "f": self.f}

    @property
    def uses_zprime(self) -> bool:
        """False when g provably ignores the z' slot."""
        g = self.g
        if isinstance(g, AffineKernel):
            return "zp" in g.mats
        return getattr(g, "uses_zprime", True)

    def phi_at(self, t: float) -> np.ndarray:
        return self.phi(t, 0.0)


# -- built-in families ---------------------------------------------------------

_AFFINE_SLOTS = {
    "b": ("x", "u"),
    "sigma": ("x", "u"),
    "g": ("xp", "x", "y", "z", "zp", "u"),
    "psi": ("xp", "x"),
}
_SCALAR_SLOTS = {"h": ("x", "y"), "f": ("x", "y", "z", "u")}


def _check_keys(table: Mapping, allowed, key: str):
    if not isinstance(table, Mapping):
        raise ParameterError(key, "expected a table")
    for name in table:
        if name not in allowed:
            raise ParameterError(f"{key}.{name}", f"unknown entry, expected one of {sorted(allowed)}")


def builtin_family(name: str, params: Optional[Mapping] = None) -> CoefficientSet:
    """Coefficient set of a named family built from a parameter table.

    ``zero`` ignores every table entry except dimensions and control box.
    ``linear_volterra`` reads affine coefficients for ``b, sigma, g, psi`` and
    linear ``h, f``. ``lq_tracking`` additionally reads quadratic weights
    (``xx, yy, zz, uu``) and references (``x_ref`` ...) for ``h`` and ``f``.
    ``tanh_volterra`` is ``lq_tracking`` with ``kappa * tanh`` saturation
    added to ``b, sigma, g, psi`` (key ``kappa`` inside each table).
    """
    params = dict(params or {})
    if name not in FAMILIES:
        raise ParameterError("family", f"unknown family {name!r}, expected one of {FAMILIES}")
    allowed_top = {"n", "m", "l", "control", "phi", "b", "sigma", "g", "psi", "h", "f"}
    _check_keys(params, allowed_top, "params")

    dims = {}
    for k in ("n", "m", "l"):
        v = params.get(k, 1)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ParameterError(f"params.{k}", "dimension must be a positive integer")
        dims[k] = v
    n, m, l = dims["n"], dims["m"], dims["l"]
    slot_dim = {"x": n, "xp": n, "y": m, "z": m, "zp": m, "u": l}

    ctl = params.get("control", {})
    _check_keys(ctl, {"lo", "hi"}, "params.control")
    try:
        box = Box(np.broadcast_to(np.asarray(ctl.get("lo", -1.0), dtype=float), (l,)).copy(),
                  np.broadcast_to(np.asarray(ctl.get("hi", 1.0), dtype=float), (l,)).copy())
    except ValueError as exc:
        raise ParameterError("params.control", str(exc)) from None
    if not box.contains(np.zeros(l)):
        raise ParameterError("params.control", "control box must contain 0")

    if name == "zero":
        params = {k: params[k] for k in ("n", "m", "l", "control") if k in params}

    quadratic = name in ("lq_tracking", "tanh_volterra")
    saturated = name == "tanh_volterra"
    out_dims = {"b": n, "sigma": n, "g": m, "psi": m}
    arg_sets = {"b": B_ARGS, "sigma": B_ARGS, "g": G_ARGS, "psi": PSI_ARGS}
    n_times = {"b": 2, "sigma": 2, "g": 2, "psi": 1}

    kernels = {}
    for kname, slots in _AFFINE_SLOTS.items():
        key = f"params.{kname}"
        table = params.get(kname, {})
        allowed = set(slots) | {"0"} | ({"kappa"} if saturated else set())
        _check_keys(table, allowed, key)
        out = out_dims[kname]
        mats = {s: Poly.parse(table.get(s), (out, slot_dim[s]), f"{key}.{s}") for s in slots}
        const = Poly.parse(table.get("0"), (out,), f"{key}.0")
        kappa = table.get("kappa", 0.0)
        if not isinstance(kappa, (int, float)):
            raise ParameterError(f"{key}.kappa", "must be a number")
        kernels[kname] = AffineKernel(kname, arg_sets[kname], n_times[kname], out,
                                      {s: slot_dim[s] for s in slots}, mats, const, kappa)

    for kname, slots in _SCALAR_SLOTS.items():
        key = f"params.{kname}"
        table = params.get(kname, {})
        allowed = set(slots) | ({"0"} if kname == "f" else set())
        if quadratic:
            allowed |= {s + s for s in slots} | {s + "_ref" for s in slots}
        _check_keys(table, allowed, key)
        lin = {s: Poly.parse(table.get(s), (slot_dim[s],), f"{key}.{s}") for s in slots}
        quad = {}
        if quadratic:
            for s in slots:
                if s + s in table:
                    quad[s] = (Poly.parse(table[s + s], (slot_dim[s], slot_dim[s]), f"{key}.{s + s}"),
                               Poly.parse(table.get(s + "_ref"), (slot_dim[s],), f"{key}.{s}_ref"))
        const = Poly.parse(table.get("0"), (), f"{key}.0")
        args, n_time = (H_ARGS, 0) if kname == "h" else (F_ARGS, 2)
        kernels[kname] = QuadraticKernel(kname, args, n_time, {s: slot_dim[s] for s in slots},
                                         quad, lin, const)

    phi = Poly.parse(params.get("phi"), (n,), "params.phi")
    return CoefficientSet(n=n, m=m, l=l, phi=phi, control_set=box, family=name,
                          params=params, **kernels)


# -- derivative checks ---------------------------------------------------------

@dataclass
class DerivativeReport:
    discrepancies: dict
    tolerance: float
    step: float

    @property
    def failed(self) -> list:
        return [k for k, v in self.discrepancies.items() if v > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> float:
        return max(self.discrepancies.values(), default=0.0)


def _slot_dims(c: CoefficientSet) -> dict:
    return {"x": c.n, "xp": c.n, "y": c.m, "z": c.m, "zp": c.m, "u": c.l}


def validate_derivatives(c: CoefficientSet, probes: int = 16, step: float = 1e-4,
                         seed: int = 0, tol: float = 1e-6) -> DerivativeReport:
    """Compare every analytic partial with a central difference.

    The discrepancy for a ``kernel.slot`` pair is the largest absolute
    difference over all probe points and entries, divided by
    ``max(1, largest analytic entry)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    sd = _slot_dims(c)
    out = {}
    for kname, kernel in c.kernels.items():
        times = [float(x) for x in rng.uniform(0.0, 1.0, kernel.n_time)]
        states = [rng.standard_normal((probes, sd[s])) for s in kernel.slots]
        for idx, slot in enumerate(kernel.slots):
            analytic = kernel.partial(slot, *times, *states)
            fd = np.zeros_like(analytic)
            for k in range(sd[slot]):
                plus = [a.copy() for a in states]
                minus = [a.copy() for a in states]
                plus[idx][:, k] += step
                minus[idx][:, k] -= step
                diff = (kernel(*times, *plus) - kernel(*times, *minus)) / (2.0 * step)
                fd[..., k] = diff
            scale = max(1.0, float(np.max(np.abs(analytic), initial=0.0)))
            out[f"{kname}.{slot}"] = float(np.max(np.abs(fd - analytic), initial=0.0)) / scale
    return DerivativeReport(out, tol, step)
