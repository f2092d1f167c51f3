"""Command line front end: ``fbsvie <command> --config run.json``.

Numerics live in the JSON config; flags only select paths, the seed and
verbosity. Exit status is 0 when every check passes, 1 on a numeric or
solver failure and 2 on a configuration error. Failures print one line to
stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bsvie import NoConvergence, SolverConfig, isometry_defect, m_property_defect
from .coefficients import FAMILIES, ParameterError, builtin_family
from .control import (ControlProblem, NoDescent, OptimizerConfig, _direction,
                      directional_derivative_variational, fd_directional_derivative,
                      linearize, mp_gradient, pairing, projected_gradient_optimize,
                      random_control, solve_state)
from .duality import (AdjointData, LinearBSVIEData, corollary_specialization,
                      eval_corollary_duality, eval_duality_pair, random_corollary_instance,
                      random_linear_instance, zero_kernel)
from .fsvie import solve_fsvie
from .lattice import (FULL_SQUARE, MAX_STEPS, AdaptedProcess, NonFiniteValue, ScenarioTree,
                      TerminalProcess, VolterraField)

COMMANDS = ("solve-forward", "solve-bsvie", "check-duality", "check-gradient", "optimize")
EXACT_FAMILIES = ("zero", "linear_volterra", "lq_tracking")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# -- configuration ---------------------------------------------------------------

SECTIONS = {
    "grid": {"steps": 4, "horizon": 1.0},
    "problem": {"kind": "C1", "family": "zero", "params": {}},
    "solver": {"picard_tol": 1e-11, "max_iter": 200, "beta": None},
    "optimize": {"step": 1.0, "max_iters": 50, "stat_tol": 1e-6, "start": "random"},
    "duality": {"instances": 20, "seed": 0, "m": 2, "scale": 0.5, "data": "random",
                "tolerance": 1e-9, "corollary_tolerance": 1e-10},
    "gradient": {"pairs": 10, "seed": 0, "eps": [0.1, 0.05], "direction": "random",
                 "tolerance": 1e-8, "fd_tolerance": 1e-9},
    "control": {"kind": "zero", "seed": 0},
    "checks": {"tolerance": 1e-9},
    "output": {"directory": "fbsvie-out", "formats": ["json", "csv"]},
}


@dataclass
class RunConfig:
    grid: dict
    problem: dict
    solver: dict
    optimize: dict
    duality: dict
    gradient: dict
    control: dict
    checks: dict
    output: dict

    def tree(self) -> ScenarioTree:
        return ScenarioTree.build(self.grid["steps"], self.grid["horizon"])

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver)


def _number(sec, key, value, positive=True, integer=False):
    name = f"{sec}.{key}"
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(name, "expected a number")
    if integer and not isinstance(value, int):
        raise ConfigError(name, "expected an integer")
    if positive and not value > 0:
        raise ConfigError(name, "must be positive")
    return value


def parse_config(raw) -> RunConfig:
    """Validate a decoded JSON document and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(key, f"unknown section, expected one of {sorted(SECTIONS)}")
    merged = {}
    for sec, defaults in SECTIONS.items():
        given = raw.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigError(sec, "expected an object")
        for key in given:
            if key not in defaults:
                raise ConfigError(f"{sec}.{key}", "unknown key")
        merged[sec] = {**defaults, **given}

    g = merged["grid"]
    _number("grid", "steps", g["steps"], integer=True)
    if not 1 <= g["steps"] <= MAX_STEPS:
        raise ConfigError("grid.steps", f"must lie in [1, {MAX_STEPS}]")
    g["horizon"] = float(_number("grid", "horizon", g["horizon"]))

    s = merged["solver"]
    s["picard_tol"] = float(_number("solver", "picard_tol", s["picard_tol"]))
    _number("solver", "max_iter", s["max_iter"], integer=True)
    if s["beta"] is not None:
        s["beta"] = float(_number("solver", "beta", s["beta"], positive=False))

    o = merged["optimize"]
    for key in ("step", "stat_tol"):
        o[key] = float(_number("optimize", key, o[key]))
    _number("optimize", "max_iters", o["max_iters"], integer=True)
    if o["start"] not in ("random", "zero"):
        raise ConfigError("optimize.start", "expected 'random' or 'zero'")

    d = merged["duality"]
    for key in ("instances", "m"):
        _number("duality", key, d[key], integer=True)
    _number("duality", "seed", d["seed"], positive=False, integer=True)
    for key in ("scale", "tolerance", "corollary_tolerance"):
        d[key] = float(_number("duality", key, d[key]))
    if d["data"] not in ("random", "zero"):
        raise ConfigError("duality.data", "expected 'random' or 'zero'")

    gr = merged["gradient"]
    _number("gradient", "pairs", gr["pairs"], integer=True)
    _number("gradient", "seed", gr["seed"], positive=False, integer=True)
    for key in ("tolerance", "fd_tolerance"):
        gr[key] = float(_number("gradient", key, gr[key]))
    if not isinstance(gr["eps"], list) or not gr["eps"]:
        raise ConfigError("gradient.eps", "expected a non-empty list")
    gr["eps"] = [float(_number("gradient", "eps", e)) for e in gr["eps"]]
    if gr["direction"] not in ("random", "zero"):
        raise ConfigError("gradient.direction", "expected 'random' or 'zero'")

    c = merged["control"]
    if c["kind"] not in ("zero", "random"):
        raise ConfigError("control.kind", "expected 'zero' or 'random'")
    _number("control", "seed", c["seed"], positive=False, integer=True)

    merged["checks"]["tolerance"] = float(_number("checks", "tolerance",
                                                  merged["checks"]["tolerance"]))

    out = merged["output"]
    if not isinstance(out["directory"], str):
        raise ConfigError("output.directory", "expected a path")
    if not isinstance(out["formats"], list) or not set(out["formats"]) <= {"json", "csv"}:
        raise ConfigError("output.formats", "expected a subset of ['json', 'csv']")

    p = merged["problem"]
    if p["kind"] not in ("C1", "C2"):
        raise ConfigError("problem.kind", "expected 'C1' or 'C2'")
    if p["family"] not in FAMILIES:
        raise ConfigError("problem.family", f"expected one of {list(FAMILIES)}")
    coeffs = build_coefficients(p)
    if p["kind"] == "C1" and coeffs.uses_zprime:
        raise ConfigError("problem.params.g.zp", "problem C1 needs a generator without z'")
    return RunConfig(**merged)


def build_coefficients(problem: dict):
    try:
        return builtin_family(problem["family"], problem["params"])
    except ParameterError as exc:
        key = exc.key.replace("params", "problem.params", 1)
        raise ConfigError(key, str(exc).split(": ", 1)[-1]) from None


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw)


# -- reporting -------------------------------------------------------------------

def check_record(name: str, lhs: float, rhs: float, tol: float, rel_scale: Optional[float] = None) -> dict:
    abs_err = abs(lhs - rhs)
    scale = abs(lhs) + 1.0 if rel_scale is None else rel_scale
    rel = abs_err / scale
    return {"name": name, "lhs": lhs, "rhs": rhs, "abs_err": abs_err, "rel_err": rel,
            "tolerance": tol, "pass": bool(rel <= tol)}


def series_rows(tree: ScenarioTree, process: AdaptedProcess, label: str) -> list:
    """``(time, statistic, value)`` rows with the mean and variance per component."""
    rows = []
    for k, v in enumerate(process):
        t = tree.time(k)
        mean, var = v.mean(axis=0), v.var(axis=0)
        for c in range(v.shape[1]):
            rows.append((t, f"mean_{label}{c}", float(mean[c])))
            rows.append((t, f"var_{label}{c}", float(var[c])))
    return rows


def write_csv(path: str, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


@dataclass
class CommandResult:
    report: dict
    tables: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.report.get("checks", []))


def _control(cfg: RunConfig, tree: ScenarioTree, coeffs, seed: int) -> AdaptedProcess:
    if cfg.control["kind"] == "zero":
        return AdaptedProcess.zeros(tree.N, coeffs.l)
    return random_control(tree, coeffs.control_set, seed)


# -- commands --------------------------------------------------------------------

def cmd_solve_forward(cfg: RunConfig, seed: int) -> CommandResult:
    tree = cfg.tree()
    coeffs = build_coefficients(cfg.problem)
    u = _control(cfg, tree, coeffs, seed)
    X = solve_fsvie(tree, coeffs, u).X
    rows = series_rows(tree, X, "x")
    final = {f"mean_x{c}": float(X[tree.N][:, c].mean()) for c in range(coeffs.n)}
    return CommandResult({"checks": [], "terminal": final},
                         {"forward.csv": (("time", "statistic", "value"), rows)})


def cmd_solve_bsvie(cfg: RunConfig, seed: int) -> CommandResult:
    tree = cfg.tree()
    coeffs = build_coefficients(cfg.problem)
    p = ControlProblem(cfg.problem["kind"], coeffs, tree, cfg.solver_config())
    st = solve_state(p, _control(cfg, tree, coeffs, seed))
    tol = cfg.checks["tolerance"]
    checks = [check_record("bsvie_residual", st.residual, 0.0, tol, 1.0)]
    if p.msolution:
        checks.append(check_record("m_property", m_property_defect(tree, st.Y, st.Z), 0.0, tol, 1.0))
        checks.append(check_record("isometry", isometry_defect(tree, st.Y, st.Z), 0.0, tol, 1.0))
    rows = series_rows(tree, st.Y, "y")
    report = {"checks": checks, "solver": {"iterations": st.iterations},
              "Y0": [float(x) for x in st.Y[0][0]]}
    return CommandResult(report, {"bsvie.csv": (("time", "statistic", "value"), rows)})


def _zero_instance(tree: ScenarioTree, m: int):
    N = tree.N
    d = LinearBSVIEData(zero_kernel(N), zero_kernel(N), zero_kernel(N),
                        TerminalProcess.zeros(tree, N, m))
    a = AdjointData(AdaptedProcess.zeros(N, m), VolterraField(tree, N, m, FULL_SQUARE))
    return d, a


def cmd_check_duality(cfg: RunConfig, seed: int) -> CommandResult:
    tree = cfg.tree()
    dc = cfg.duality
    solver = cfg.solver_config()
    checks, trails = [], []
    for k in range(dc["instances"]):
        m = 1 + k % dc["m"]
        s = seed + k
        if dc["data"] == "zero":
            d, a = _zero_instance(tree, m)
        else:
            d, a = random_linear_instance(tree, m, s, dc["scale"])
        pair = eval_duality_pair(tree, d, a, solver)
        checks.append(check_record(f"duality[{k}]", pair.lhs, pair.rhs, dc["tolerance"]))
        trails.append({"instance": k, "bsvie_iterations": pair.bsvie.iterations,
                       "xi_iterations": pair.xi.iterations,
                       "bsvie_trail": pair.bsvie.trail, "xi_residual": pair.xi.residual})
        if dc["data"] == "zero":
            continue
        A0, C0, phi, psi = random_corollary_instance(tree, m, s, dc["scale"])
        cor = eval_corollary_duality(tree, A0, C0, phi, psi, solver)
        spec = eval_duality_pair(tree, *corollary_specialization(tree, A0, C0, phi, psi), solver)
        checks.append(check_record(f"corollary[{k}]", cor.lhs, cor.rhs, dc["tolerance"]))
        checks.append(check_record(f"corollary_vs_specialized[{k}]", cor.rhs, spec.rhs,
                                   dc["corollary_tolerance"]))
    return CommandResult({"checks": checks, "solver": trails})


def cmd_check_gradient(cfg: RunConfig, seed: int) -> CommandResult:
    tree = cfg.tree()
    gc = cfg.gradient
    coeffs = build_coefficients(cfg.problem)
    p = ControlProblem(cfg.problem["kind"], coeffs, tree, cfg.solver_config())
    exact = cfg.problem["family"] in EXACT_FAMILIES
    checks, records = [], []
    for k in range(gc["pairs"]):
        u_bar = random_control(tree, coeffs.control_set, seed + 2 * k, 0.5)
        if gc["direction"] == "zero":
            v = u_bar
        else:
            # both controls in the half-size box, so central differences stay admissible for eps <= 1/2
            v = random_control(tree, coeffs.control_set, seed + 2 * k + 1, 0.5)
        st = solve_state(p, u_bar)
        lin = linearize(p, st)
        dvar = directional_derivative_variational(p, u_bar, v, st, lin)
        dadj = pairing(tree, mp_gradient(p, u_bar, st=st, lin=lin), _direction(p, u_bar, v))
        fds = [fd_directional_derivative(p, u_bar, v, e) for e in gc["eps"]]
        scale = max(abs(dvar), 1.0)
        checks.append(check_record(f"variational_vs_adjoint[{k}]", dvar, dadj, gc["tolerance"], scale))
        rec = {"pair": k, "variational": dvar, "adjoint": dadj,
               "central": dict(zip(map(repr, gc["eps"]), fds))}
        if exact:
            checks.append(check_record(f"central_vs_variational[{k}]", fds[0], dvar,
                                       gc["fd_tolerance"], scale))
        else:
            errs = [abs(f - dvar) for f in fds]
            rec["fd_errors"] = errs
            if len(errs) >= 2:
                ok = richardson_consistent(gc["eps"], errs)
                checks.append({"name": f"richardson[{k}]", "lhs": errs[0], "rhs": errs[1],
                               "abs_err": abs(errs[0] - errs[1]), "rel_err": 0.0 if ok else 1.0,
                               "tolerance": 0.0, "pass": ok})
        records.append(rec)
    return CommandResult({"checks": checks, "derivatives": records})


def richardson_consistent(eps, errs, floor: float = 1e-9) -> bool:
    """Successive central-difference errors shrink like ``eps**2``."""
    for (e0, e1), (r0, r1) in zip(zip(eps, eps[1:]), zip(errs, errs[1:])):
        if max(r0, r1) <= floor:
            continue
        expected = (e0 / e1) ** 2
        if r1 == 0 or not 0.6 * expected <= r0 / r1 <= 1.4 * expected:
            return False
    return True


def cmd_optimize(cfg: RunConfig, seed: int) -> CommandResult:
    tree = cfg.tree()
    coeffs = build_coefficients(cfg.problem)
    p = ControlProblem(cfg.problem["kind"], coeffs, tree, cfg.solver_config())
    oc = cfg.optimize
    if oc["start"] == "zero":
        start = AdaptedProcess.zeros(tree.N, coeffs.l)
    else:
        start = random_control(tree, coeffs.control_set, seed)
    res = projected_gradient_optimize(p, start, OptimizerConfig(
        step=oc["step"], max_iters=oc["max_iters"], stat_tol=oc["stat_tol"]))
    hist = [(h["iter"], h["J"], h["stationarity_residual"]) for h in res.history]
    dump = [(tree.time(k), n, c, float(res.u[k][n, c]))
            for k in range(tree.N) for n in range(2 ** k) for c in range(coeffs.l)]
    monotone = all(b[1] <= a[1] + 1e-14 for a, b in zip(hist, hist[1:]))
    checks = [
        {"name": "stationarity", "lhs": res.residual, "rhs": 0.0, "abs_err": res.residual,
         "rel_err": res.residual, "tolerance": oc["stat_tol"], "pass": bool(res.converged)},
        {"name": "monotone_J", "lhs": hist[0][1], "rhs": hist[-1][1],
         "abs_err": abs(hist[0][1] - hist[-1][1]), "rel_err": 0.0 if monotone else 1.0,
         "tolerance": 0.0, "pass": monotone},
    ]
    return CommandResult({"checks": checks, "history": res.history, "J": res.J},
                         {"history.csv": (("iter", "J", "stationarity_residual"), hist),
                          "control.csv": (("time", "node", "component", "value"), dump)})


HANDLERS = {
    "solve-forward": cmd_solve_forward,
    "solve-bsvie": cmd_solve_bsvie,
    "check-duality": cmd_check_duality,
    "check-gradient": cmd_check_gradient,
    "optimize": cmd_optimize,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def default_seed(command: str, cfg: RunConfig) -> int:
    return {"check-duality": cfg.duality["seed"],
            "check-gradient": cfg.gradient["seed"]}.get(command, cfg.control["seed"])


def run(command: str, cfg: RunConfig, seed: Optional[int] = None,
        out_dir: Optional[str] = None) -> CommandResult:
    """Run one command and write its outputs; returns the result."""
    seed = default_seed(command, cfg) if seed is None else seed
    start = time.perf_counter()
    result = HANDLERS[command](cfg, seed)
    elapsed = time.perf_counter() - start
    result.report = {"command": command, "config": asdict(cfg), "seed": seed,
                     "pass": result.passed, **result.report}
    out_dir = out_dir or cfg.output["directory"]
    os.makedirs(out_dir, exist_ok=True)
    if "json" in cfg.output["formats"]:
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(_jsonable(result.report), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
        with open(os.path.join(out_dir, "timing.json"), "w", encoding="utf-8") as fh:
            json.dump({"command": command, "seconds": elapsed}, fh, indent=2)
            fh.write("\n")
    if "csv" in cfg.output["formats"]:
        for name, (header, rows) in result.tables.items():
            write_csv(os.path.join(out_dir, name), header, rows)
    return result


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbsvie", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", help="output directory (overrides output.directory)")
    ap.add_argument("--seed", type=int, help="seed for random instances and controls")
    ap.add_argument("--quiet", action="store_true", help="suppress the summary line")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.duality["seed"] = cfg.gradient["seed"] = cfg.control["seed"] = args.seed
        result = run(args.command, cfg, None, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NoConvergence, NoDescent, NonFiniteValue, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    failed = [c["name"] for c in result.report["checks"] if not c["pass"]]
    if failed:
        print(f"check failure: {len(failed)} failed, first {failed[0]}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(f"{args.command}: ok ({len(result.report['checks'])} checks)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
