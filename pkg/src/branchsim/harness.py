"""Experiment specs, the experiment runner and the verification suite.

A spec is a nested mapping (TOML file or JSON) with the sections
``base_process``, ``killing``, ``branching`` and/or ``mechanism``,
``composition``, ``mesh``, ``monte_carlo``, ``experiment``, ``outputs`` and
``verify``.  See the README for the full schema.
"""
from __future__ import annotations

import ast
import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .base_process import BaseModel
from .config_space import Configuration, ScalarField, validate_points
from .io import canonical_json, csv_text, read_text, table_csv, table_meta, write_text
from .linear import perturbation_spec, solve_Q_feynman_kac, solve_Q_picard
from .mechanism import Displacement, OffspringLaw, constants
from .nonlinear import cumulant_V, invariant_residual, solve_H
from .particles import (DEFAULT_CAP, FUNCTIONALS, replica_values, simulate_replicas,
                        verify_branching_property)
from .picard import SemigroupTable, SolverMesh
from .stats import Estimate
from .streams import SeededStream
from .superprocess import (MeasureState, MechanismPhi, compose_discrete_over_measure,
                           solve_cumulant_N, superprocess_laplace)

COMMANDS = ("solve-h", "solve-q", "cumulant", "simulate", "verify", "compose")
CHECKS = ("mass", "iterate_bound", "laplace", "moment", "branching", "extinction",
          "cumulant", "composition")
DEFAULT_TOLERANCES = {
    "quadrature": 1e-5,      # deterministic solver identities
    "mc_se": 3.0,            # Monte Carlo checks: |diff| <= mc_se * stderr
    "iterate_slack": 1e-6,   # added to the Picard iterate bound
    "residual": 1e-3,        # invariant-function residual
    "composition_rel": 0.10,  # relative error of the composed mean mass
}
ANCHORS = {
    "mass": "mass conservation: H_t 1 = 1 when the offspring law is Markovian (B1 = 1)",
    "iterate_bound": "Picard iterates: |H^(n+1)_t phi - H^n_t phi| <= (beta0 t)^n / n! |phi|",
    "laplace": "Laplace identity: E exp(-<mu_t, f>) = exp(-<mu_0, V_t f>)",
    "moment": "first moment: exp(-beta1 t) E <mu_t, f> = <mu_0, Q_t f>",
    "branching": "branching property: the law from mu + nu is the convolution of the laws "
                 "from mu and from nu",
    "extinction": "invariant function: the extinction probability v solves "
                  "(L - c) v + c B(v) = 0 and P(mu_t = 0) = H_t 0",
    "cumulant": "superprocess cumulant: E exp(-<X_t, f>) = exp(-<mu_0, N_t f>)",
    "composition": "composed process: discrete branching over superprocess clusters has "
                   "mean mass exp((q_o - 1) c t - b t) <mu_0, 1>",
}


class ValidationError(ValueError):
    """The experiment spec is malformed or violates a module invariant."""


# ---------------------------------------------------------------- fields

_SAFE_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "log": np.log,
               "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh}
_SAFE_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
               ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd)


def eval_expression(expr: str, x: np.ndarray) -> np.ndarray:
    """Evaluate an arithmetic expression in ``x`` (sin, cos, exp, log, sqrt, abs, tanh, pi)."""
    tree = ast.parse(expr, mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, _SAFE_NODES):
            raise ValidationError(f"unsupported syntax in expression {expr!r}")
        if isinstance(node, ast.Name) and node.id not in _SAFE_FUNCS and node.id not in ("x", "pi"):
            raise ValidationError(f"unknown name {node.id!r} in expression {expr!r}")
    env = dict(_SAFE_FUNCS, x=x, pi=math.pi)
    out = eval(compile(tree, "<field>", "eval"), {"__builtins__": {}}, env)
    return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy()


def make_field(model: BaseModel, value, name: str) -> ScalarField:
    n = model.n_states
    x = np.arange(n) * (model.length / n) if model.kind == "brownian_torus" else np.arange(n, dtype=float)
    if isinstance(value, str):
        vals = eval_expression(value, x)
    else:
        vals = np.asarray(value, dtype=float)
        if vals.ndim == 0:
            vals = np.full(n, float(vals))
    if vals.shape != (n,):
        raise ValidationError(f"{name}: expected a scalar or {n} values, got shape {vals.shape}")
    try:
        return model.field(vals)
    except ValueError as exc:
        raise ValidationError(f"{name}: {exc}") from exc


# ---------------------------------------------------------------- spec

@dataclass
class ExperimentSpec:
    model: BaseModel
    law: OffspringLaw | None
    mechanism: MechanismPhi | None
    compose_c: float
    compose_law: OffspringLaw | None
    mesh: SolverMesh
    scheme: str
    replicas: int
    cap: int
    master_seed: int
    n_scale: int
    workers: int
    initial: Configuration
    nu: Configuration
    measures: list
    f: ScalarField
    phi: ScalarField
    t: float
    functional: str
    probe_dt: float
    feynman_kac: bool
    out_dir: Path | None
    formats: tuple
    checks: tuple
    tolerances: dict
    raw: dict = field(default_factory=dict)

    @property
    def stream(self) -> SeededStream:
        return SeededStream(self.master_seed)


def _section(data: dict, name: str) -> dict:
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise ValidationError(f"[{name}] must be a table/object")
    return sec


def _law(sec: dict, what: str) -> OffspringLaw:
    if "q" not in sec:
        raise ValidationError(f"[{what}] needs q")
    disp = sec.get("displacement", {"kind": "none"})
    try:
        d = Displacement(disp.get("kind", "none"), float(disp.get("parameter", 0.0)))
        return OffspringLaw(sec["q"], d)
    except (ValueError, TypeError, AttributeError) as exc:
        raise ValidationError(f"[{what}] {exc}") from exc


def _model(data: dict) -> BaseModel:
    bp = _section(data, "base_process")
    kind = bp.get("kind", "single_site")
    c = _section(data, "killing").get("c", 0.0)
    try:
        if kind == "single_site":
            model = BaseModel.single_site(0.0)
        elif kind == "finite_chain":
            if "rate_matrix" not in bp:
                raise ValidationError("[base_process] finite_chain needs rate_matrix")
            model = BaseModel.finite_chain(bp["rate_matrix"], 0.0)
        elif kind == "brownian_torus":
            model = BaseModel.brownian_torus(float(bp.get("diffusion", 1.0)),
                                             float(bp.get("length", 2 * math.pi)),
                                             int(bp.get("grid", 64)), 0.0,
                                             float(bp.get("cn_dt", 1e-3)))
        else:
            raise ValidationError(f"[base_process] unknown kind {kind!r}")
        cf = make_field(model, c, "killing.c")
        return model.with_killing(cf)
    except ValidationError:
        raise
    except ValueError as exc:
        raise ValidationError(f"[base_process] {exc}") from exc


def _configuration(model: BaseModel, pts, name: str) -> Configuration:
    try:
        mu = Configuration(np.asarray(pts, dtype=float if model.kind == "brownian_torus"
                                      else np.int64))
        validate_points(mu, model.killing)
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"{name}: {exc}") from exc
    return mu


def _measure(atoms, name: str) -> MeasureState:
    try:
        arr = np.asarray(atoms, dtype=float).reshape(-1, 2)
        return MeasureState(arr[:, 0], arr[:, 1])
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"{name}: atoms must be [[point, weight], ...] ({exc})") from exc


def parse_spec(data: dict, seed: int | None = None, out_dir=None, workers: int | None = None,
               fmt: str | None = None) -> ExperimentSpec:
    """Validate a spec mapping; command-line overrides take precedence."""
    if not isinstance(data, dict):
        raise ValidationError("spec must be a mapping")
    model = _model(data)
    law = _law(_section(data, "branching"), "branching") if "branching" in data else None
    if law is not None:
        try:
            law.rows_on(model.n_states)
            if not law.displacement.is_local and model.kind != "brownian_torus":
                raise ValueError("displaced offspring need the torus model")
        except ValueError as exc:
            raise ValidationError(f"[branching] {exc}") from exc
    mech = None
    if "mechanism" in data:
        ms = _section(data, "mechanism")
        try:
            mech = MechanismPhi(float(ms.get("a", 0.0)), float(ms.get("b", 0.0)),
                                tuple(tuple(j) for j in ms.get("jumps", [])))
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"[mechanism] {exc}") from exc
    comp = _section(data, "composition")
    compose_law = _law(comp, "composition") if comp else None
    compose_c = float(comp.get("c", 0.0)) if comp else 0.0
    if compose_law is not None and (not compose_law.is_constant or compose_c < 0):
        raise ValidationError("[composition] needs a constant law and c >= 0")

    ex = _section(data, "experiment")
    t = float(ex.get("t", 1.0))
    if t < 0:
        raise ValidationError("[experiment] t must be >= 0")
    ms = _section(data, "mesh")
    try:
        mesh = SolverMesh(float(ms.get("dt", 1e-3)), float(ms.get("t_max", t)),
                          float(ms.get("picard_tol", 1e-11)), int(ms.get("max_iters", 500)))
    except ValueError as exc:
        raise ValidationError(f"[mesh] {exc}") from exc
    scheme = ms.get("scheme", "auto")
    if scheme not in ("auto", "plain", "primed"):
        raise ValidationError("[mesh] scheme must be auto, plain or primed")

    mc = _section(data, "monte_carlo")
    if seed is None:
        if "master_seed" not in mc:
            raise ValidationError("[monte_carlo] master_seed is mandatory")
        seed = mc["master_seed"]
    try:
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ValueError
    except (ValueError, TypeError):
        raise ValidationError("master_seed must be an unsigned 64-bit integer") from None
    replicas = int(mc.get("replicas", 10_000))
    cap = int(mc.get("cap", DEFAULT_CAP))
    n_scale = int(mc.get("n_scale", 100))
    workers = int(workers if workers is not None else mc.get("workers", 1))
    if replicas < 1 or cap < 1 or n_scale < 1 or workers < 1:
        raise ValidationError("[monte_carlo] replicas, cap, n_scale and workers must be >= 1")

    initial = _configuration(model, ex.get("initial", [0]), "experiment.initial")
    nu = _configuration(model, ex.get("nu", []), "experiment.nu")
    if cap < initial.size + nu.size:
        raise ValidationError("[monte_carlo] cap is below the initial population")
    measures = [_measure(m, "experiment.measures") for m in ex.get("measures", [])]
    if "measure" in ex:
        measures = [_measure(ex["measure"], "experiment.measure")] + measures
    if not measures:
        measures = [MeasureState([0.0], [1.0])]
    f = make_field(model, ex.get("f", 1.0), "experiment.f")
    if np.any(f.values < 0):
        raise ValidationError("experiment.f must be >= 0")
    phi = make_field(model, ex["phi"], "experiment.phi") if "phi" in ex \
        else f.like(np.exp(-f.values))
    if not phi.in_unit_interval():
        raise ValidationError("experiment.phi must take values in [0, 1]")
    functional = ex.get("functional", "exponential")
    if functional not in FUNCTIONALS:
        raise ValidationError(f"experiment.functional must be one of {FUNCTIONALS}")

    out = _section(data, "outputs")
    out_dir = Path(out_dir) if out_dir is not None else (
        Path(out["directory"]) if "directory" in out else None)
    formats = (fmt,) if fmt else tuple(out.get("formats", ["csv"]))
    if any(x not in ("csv", "json") for x in formats):
        raise ValidationError("[outputs] formats must be csv and/or json")

    vf = _section(data, "verify")
    checks = tuple(vf.get("checks", []))
    bad = [c for c in checks if c not in CHECKS]
    if bad:
        raise ValidationError(f"[verify] unknown checks {bad}")
    tol = dict(DEFAULT_TOLERANCES)
    tol.update({k: float(v) for k, v in vf.get("tolerances", {}).items()})

    return ExperimentSpec(model, law, mech, compose_c, compose_law, mesh, scheme, replicas,
                          cap, seed, n_scale, workers, initial, nu, measures, f, phi, t,
                          functional, float(ex.get("probe_dt", 1e-3)),
                          bool(ex.get("feynman_kac", model.kind != "brownian_torus")),
                          out_dir, formats, checks, tol, data)


def load_spec(path, **overrides) -> ExperimentSpec:
    path = Path(path)
    text = read_text(path)
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError(f"cannot parse {path}: {exc}") from exc
    return parse_spec(data, **overrides)


# ---------------------------------------------------------------- running

@dataclass
class Bundle:
    command: str
    tables: dict = field(default_factory=dict)
    estimates: list = field(default_factory=list)
    replica_rows: list = field(default_factory=list)
    report: dict | None = None
    meta: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)


ESTIMATE_COLUMNS = ["name", "state", "mean", "stderr", "replicas", "capped", "reference"]


def _estimate_row(name, state, est: Estimate, reference=math.nan) -> dict:
    return {"name": name, "state": state, "mean": est.mean, "stderr": est.stderr,
            "replicas": est.replicas, "capped": est.capped, "reference": float(reference)}


def _need(spec: ExperimentSpec, what: str):
    obj = {"law": spec.law, "mechanism": spec.mechanism, "composition": spec.compose_law}[what]
    if obj is None:
        section = {"law": "branching", "mechanism": "mechanism",
                   "composition": "composition"}[what]
        raise ValidationError(f"this command needs a [{section}] section")
    return obj


def _mesh_to(spec: ExperimentSpec, t: float) -> SolverMesh:
    m = spec.mesh
    if t == 0:
        return SolverMesh(m.dt, 0.0, m.picard_tol, m.max_iters)
    steps = max(1, math.ceil(t / m.dt - 1e-9))
    return SolverMesh(t / steps, t, m.picard_tol, m.max_iters)


def _sum_over(mu: Configuration, field_values: ScalarField) -> float:
    return math.fsum(field_values(mu.points)) if mu.size else 0.0


def _prod_over(mu: Configuration, field_values: ScalarField) -> float:
    return float(np.prod(np.sort(field_values(mu.points)))) if mu.size else 1.0


def analytic_reference(spec: ExperimentSpec, functional: str, mu: Configuration) -> float:
    """The solver-side value of ``E F(mu_t)`` for the discrete system."""
    law = _need(spec, "law")
    mesh = _mesh_to(spec, spec.t)
    if functional == "exponential":
        V = cumulant_V(spec.model, law, spec.f, mesh, spec.scheme)
        return math.exp(-_sum_over(mu, V.final))
    if functional in ("multiplicative", "extinction"):
        phi = spec.phi if functional == "multiplicative" else spec.phi.like(np.zeros(spec.phi.n))
        H = solve_H(spec.model, law, phi, mesh, spec.scheme)
        return _prod_over(mu, H.final)
    f = spec.f if functional == "linear" else spec.f.like(np.ones(spec.f.n))
    Q = solve_Q_picard(spec.model, law, f, mesh, warn=False)
    return math.exp(Q.meta["beta1"] * spec.t) * _sum_over(mu, Q.final)


def run_experiment(spec: ExperimentSpec, command: str) -> Bundle:
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command!r}")
    t0 = time.perf_counter()
    bundle = Bundle(command)
    bundle.meta = {"command": command, "master_seed": spec.master_seed,
                   "versions": {"branchsim": __version__, "numpy": np.__version__,
                                "scipy": scipy.__version__,
                                "python": platform.python_version()},
                   "spec": spec.raw}
    if command == "solve-h":
        H = solve_H(spec.model, _need(spec, "law"), spec.phi, spec.mesh, spec.scheme)
        bundle.tables["H"] = H
    elif command == "solve-q":
        _run_q(spec, bundle)
    elif command == "cumulant":
        if spec.mechanism is not None and spec.law is None:
            bundle.tables["N"] = solve_cumulant_N(spec.model, spec.mechanism, spec.f, spec.mesh)
        else:
            bundle.tables["V"] = cumulant_V(spec.model, _need(spec, "law"), spec.f, spec.mesh,
                                            spec.scheme)
    elif command == "simulate":
        _run_simulate(spec, bundle)
    elif command == "compose":
        _run_compose(spec, bundle)
    else:
        bundle.report = verify_suite(spec, spec.checks or default_checks(spec))
    bundle.timing["total_seconds"] = time.perf_counter() - t0
    return bundle


def default_checks(spec: ExperimentSpec) -> tuple:
    """Checks applicable to the sections present in the spec."""
    out = []
    if spec.law is not None:
        out += ["mass", "iterate_bound", "laplace", "moment", "branching", "extinction"]
        if not spec.law.markovian:
            out = ["iterate_bound"]
    if spec.mechanism is not None:
        out.append("cumulant")
        if spec.compose_law is not None:
            out.append("composition")
    return tuple(out)


def _run_q(spec: ExperimentSpec, bundle: Bundle) -> None:
    law = _need(spec, "law")
    Q = solve_Q_picard(spec.model, law, spec.f, spec.mesh)
    bundle.tables["Q"] = Q
    pspec = perturbation_spec(spec.model, law)
    bundle.meta["hypotheses"] = pspec.hypotheses
    if spec.feynman_kac and pspec.constant_killing and law.displacement.is_local:
        ests = solve_Q_feynman_kac(spec.model, law, spec.f, spec.mesh.t_max, spec.replicas,
                                   spec.stream.child(3))
        for x, est in enumerate(ests):
            bundle.estimates.append(_estimate_row("Q_feynman_kac", x, est, Q.values[-1, x]))


def _run_simulate(spec: ExperimentSpec, bundle: Bundle) -> None:
    if spec.law is None and spec.mechanism is not None:
        mu = spec.measures[0]
        fn = "linear" if spec.functional == "linear" else "exponential"
        est = superprocess_laplace(spec.model, spec.mechanism, mu, spec.t, spec.f, spec.n_scale,
                                   spec.replicas, spec.stream, spec.cap, spec.workers, fn)
        N = solve_cumulant_N(spec.model, spec.mechanism, spec.f, _mesh_to(spec, spec.t))
        ref = math.exp(-mu.integrate(N.final)) if fn == "exponential" else math.nan
        bundle.estimates.append(_estimate_row("superprocess_" + fn, "", est, ref))
        return
    law = _need(spec, "law")
    batch = simulate_replicas(spec.model, law, spec.initial, spec.t, spec.replicas,
                              spec.stream, spec.cap, spec.workers)
    f = spec.phi if spec.functional == "multiplicative" else spec.f
    vals = replica_values(batch, f, spec.functional)
    sizes = batch.sizes()[~batch.capped]
    ids = np.flatnonzero(~batch.capped)
    bundle.replica_rows = [(int(r), float(v), int(s)) for r, v, s in zip(ids, vals, sizes)]
    est = Estimate.from_samples(vals, int(batch.capped.sum())).check()
    ref = analytic_reference(spec, spec.functional, spec.initial) if law.markovian else math.nan
    bundle.estimates.append(_estimate_row(spec.functional, "", est, ref))


def _run_compose(spec: ExperimentSpec, bundle: Bundle) -> None:
    mech = _need(spec, "mechanism")
    law = _need(spec, "composition")
    for fn in ("exponential", "mass"):
        est = compose_discrete_over_measure(spec.model, mech, law, spec.compose_c, spec.measures,
                                            spec.t, spec.f, spec.n_scale, spec.replicas,
                                            spec.stream.child(0 if fn == "exponential" else 1),
                                            fn, spec.cap)
        ref = math.nan
        if fn == "mass":
            qo = float(law.mean_offspring[0])
            ref = math.exp((qo - 1.0) * spec.compose_c * spec.t - mech.b * spec.t) * \
                math.fsum(m.total_mass for m in spec.measures)
        bundle.estimates.append(_estimate_row("compose_" + fn, "", est, ref))


# ---------------------------------------------------------------- verification

def _check(name, passed, statistic, tolerance, reference, measured, **detail) -> dict:
    return {"check": name, "anchor": ANCHORS[name], "status": "PASS" if passed else "FAIL",
            "statistic": statistic, "tolerance": tolerance, "reference": reference,
            "measured": measured, "detail": detail}


def verify_suite(spec: ExperimentSpec, checks) -> dict:
    """Run the requested identity checks; every entry carries PASS/FAIL."""
    checks = tuple(checks)
    if not checks:
        raise ValidationError("no checks requested")
    results = []
    for i, name in enumerate(checks):
        if name not in CHECKS:
            raise ValidationError(f"unknown check {name!r}")
        results.append(_CHECK_FUNCS[name](spec, spec.stream.child(100 + i)))
    return {"checks": results, "passed": all(r["status"] == "PASS" for r in results)}


def _mass(spec, _stream):
    law = _need(spec, "law")
    H = solve_H(spec.model, law, spec.f.like(np.ones(spec.f.n)), spec.mesh, spec.scheme)
    err = float(np.max(np.abs(H.values - 1.0)))
    tol = spec.tolerances["quadrature"]
    ok = law.markovian and err <= tol
    return _check("mass", ok, err, tol, 1.0, float(H.values.min()),
                  markovian=law.markovian, iterations=H.meta["iterations"])


def _iterate_bound(spec, _stream):
    law = _need(spec, "law")
    n_max = 10
    H = solve_H(spec.model, law, spec.phi, spec.mesh, "plain", keep_iterates=True,
                fixed_iters=n_max + 1)
    beta0 = constants(law, spec.model.killing).beta0
    worst = -math.inf
    slack = spec.tolerances["iterate_slack"]
    for n in range(len(H.iterates) - 1):
        gap = np.max(np.abs(H.iterates[n + 1] - H.iterates[n]), axis=1)
        bound = (beta0 * H.times) ** n / math.factorial(n) * spec.phi.sup_norm
        worst = max(worst, float(np.max(gap - bound)))
    monotone = all(bool(np.all(H.iterates[n + 1] >= H.iterates[n] - 1e-14))
                   for n in range(len(H.iterates) - 1))
    ok = worst <= slack and monotone
    return _check("iterate_bound", ok, worst, slack, 0.0, worst,
                  beta0=beta0, iterations=len(H.iterates) - 1, monotone=monotone)


def _mc_compare(name, est: Estimate, ref: float, spec, slack=0.0, **detail):
    k = spec.tolerances["mc_se"]
    diff = est.mean - ref
    tol = k * est.stderr + slack
    return _check(name, abs(diff) <= tol, diff, tol, ref, est.mean,
                  stderr=est.stderr, replicas=est.replicas, capped=est.capped, **detail)


def _laplace(spec, stream):
    law = _need(spec, "law")
    batch = simulate_replicas(spec.model, law, spec.initial, spec.t, spec.replicas, stream,
                              spec.cap, spec.workers)
    est = Estimate.from_samples(replica_values(batch, spec.f, "exponential"),
                                int(batch.capped.sum())).check()
    return _mc_compare("laplace", est, analytic_reference(spec, "exponential", spec.initial), spec)


def _moment(spec, stream):
    law = _need(spec, "law")
    batch = simulate_replicas(spec.model, law, spec.initial, spec.t, spec.replicas, stream,
                              spec.cap, spec.workers)
    beta1 = constants(law, spec.model.killing).beta1
    scale = math.exp(-beta1 * spec.t)
    est = Estimate.from_samples(replica_values(batch, spec.f, "linear"),
                                int(batch.capped.sum())).check().scaled(scale)
    ref = analytic_reference(spec, "linear", spec.initial) * scale
    return _mc_compare("moment", est, ref, spec, beta1=beta1,
                       hypotheses=constants(law, spec.model.killing).moment_hypotheses)


def _branching(spec, stream):
    law = _need(spec, "law")
    rep = verify_branching_property(spec.model, law, spec.initial, spec.nu, spec.t, spec.f,
                                    spec.replicas, stream, spec.cap, spec.workers)
    k = spec.tolerances["mc_se"]
    return _check("branching", abs(rep.z) <= k, rep.z, k, 0.0, rep.combined.mean,
                  first=rep.first.mean, second=rep.second.mean)


def extinction_fixed_point(law: OffspringLaw) -> float:
    """Smallest root in [0, 1] of ``G(s) = s`` for a constant Markovian law."""
    q = law.q[0]
    if q.size < 2:
        return 1.0
    coef = q[::-1].copy()
    coef[-2] -= 1.0
    roots = np.roots(np.trim_zeros(coef, "f"))
    real = [r.real for r in roots if abs(r.imag) < 1e-9 and -1e-9 <= r.real <= 1 + 1e-9]
    return float(min(min(max(0.0, r) for r in real), 1.0)) if real else 1.0


def _extinction(spec, stream):
    law = _need(spec, "law")
    detail = {}
    ok = True
    c = spec.model.killing.values
    if law.is_constant and np.all(c == c[0]):
        v = extinction_fixed_point(law)
        res = invariant_residual(spec.model, law, spec.f.like(np.full(spec.f.n, v)), spec.probe_dt)
        detail = {"fixed_point": v, "residual": res.sup_norm, "probe_dt": spec.probe_dt}
        ok = res.sup_norm <= spec.tolerances["residual"]
    batch = simulate_replicas(spec.model, law, spec.initial, spec.t, spec.replicas, stream,
                              spec.cap, spec.workers)
    est = Estimate.from_samples(replica_values(batch, None, "extinction"),
                                int(batch.capped.sum())).check()
    out = _mc_compare("extinction", est, analytic_reference(spec, "extinction", spec.initial),
                      spec, **detail)
    if not ok:
        out["status"] = "FAIL"
    return out


def _cumulant(spec, stream):
    mech = _need(spec, "mechanism")
    mu = spec.measures[0]
    N = solve_cumulant_N(spec.model, mech, spec.f, _mesh_to(spec, spec.t))
    ref = math.exp(-mu.integrate(N.final))
    est = superprocess_laplace(spec.model, mech, mu, spec.t, spec.f, spec.n_scale,
                               spec.replicas, stream, spec.cap, spec.workers)
    # the particle system differs from its limit by O(1/n); allow that much
    return _mc_compare("cumulant", est, ref, spec, slack=1.0 / spec.n_scale,
                       n_scale=spec.n_scale, iterations=N.meta["iterations"])


def _composition(spec, stream):
    mech = _need(spec, "mechanism")
    law = _need(spec, "composition")
    est = compose_discrete_over_measure(spec.model, mech, law, spec.compose_c, spec.measures,
                                        spec.t, spec.f, spec.n_scale, spec.replicas, stream,
                                        "mass", spec.cap)
    qo = float(law.mean_offspring[0])
    ref = math.exp((qo - 1.0) * spec.compose_c * spec.t - mech.b * spec.t) * \
        math.fsum(m.total_mass for m in spec.measures)
    rel = abs(est.mean - ref) / ref
    tol = spec.tolerances["composition_rel"]
    return _check("composition", rel <= tol, rel, tol, ref, est.mean, stderr=est.stderr,
                  replicas=est.replicas, n_scale=spec.n_scale)


_CHECK_FUNCS = {"mass": _mass, "iterate_bound": _iterate_bound, "laplace": _laplace,
                "moment": _moment, "branching": _branching, "extinction": _extinction,
                "cumulant": _cumulant, "composition": _composition}


def report_text(report: dict) -> str:
    lines = []
    for r in report["checks"]:
        lines.append(f"{r['status']} {r['check']}: statistic={r['statistic']:.6g} "
                     f"tolerance={r['tolerance']:.6g} reference={r['reference']:.6g} "
                     f"measured={r['measured']:.6g}")
        lines.append(f"    {r['anchor']}")
    lines.append("ALL PASS" if report["passed"] else "SOME CHECKS FAILED")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- export

def export_results(bundle: Bundle, out_dir, formats=("csv",)) -> list:
    """Write the bundle; file contents depend only on spec and seed."""
    out_dir = Path(out_dir)
    written = []
    meta = dict(bundle.meta)
    meta["tables"] = {name: table_meta(t) for name, t in bundle.tables.items()}
    if "csv" in formats:
        for name, table in bundle.tables.items():
            written.append(write_text(out_dir / f"{name}.csv", table_csv(table)))
        if bundle.command in ("simulate", "compose", "solve-q") or bundle.estimates:
            rows = [[e[c] for c in ESTIMATE_COLUMNS] for e in bundle.estimates]
            written.append(write_text(out_dir / "estimates.csv", csv_text(ESTIMATE_COLUMNS, rows)))
        if bundle.replica_rows:
            written.append(write_text(out_dir / "replicas.csv",
                                      csv_text(["replica", "value", "size"], bundle.replica_rows)))
        if bundle.report is not None:
            rows = [[r["check"], r["status"], r["statistic"], r["tolerance"], r["reference"],
                     r["measured"]] for r in bundle.report["checks"]]
            written.append(write_text(out_dir / "verify.csv", csv_text(
                ["check", "status", "statistic", "tolerance", "reference", "measured"], rows)))
        written.append(write_text(out_dir / "metadata.json", canonical_json(meta)))
    if "json" in formats:
        doc = {"metadata": meta, "estimates": bundle.estimates,
               "tables": {name: {"times": t.times, "values": t.values}
                          for name, t in bundle.tables.items()}}
        if bundle.report is not None:
            doc["report"] = bundle.report
        written.append(write_text(out_dir / "bundle.json", canonical_json(doc)))
    if bundle.report is not None:
        written.append(write_text(out_dir / "verify.json", canonical_json(bundle.report)))
        written.append(write_text(out_dir / "verify.txt", report_text(bundle.report)))
    written.append(write_text(out_dir / "timing.json", canonical_json(bundle.timing)))
    return written
