"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Reference values marked "oracle" come from tests/oracles.py, which solves the
same equations by independent means (RK4, scipy Radau, matrix exponentials).
"""
import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

import oracles
from branchsim import (BaseModel, Configuration, OffspringLaw, ScalarField, SeededStream,
                       SolverMesh, cumulant_V, estimate_functional, invariant_residual,
                       solve_H, solve_Q_feynman_kac, solve_Q_picard, solve_cumulant_N,
                       verify_branching_property)
from branchsim import cli
from branchsim.mechanism import constants
from branchsim.superprocess import (MeasureState, MechanismPhi, compose_discrete_over_measure,
                                    particle_laplace_exact, superprocess_laplace)

L3 = [[-1.0, 0.5, 0.5], [1.0, -2.0, 1.0], [0.3, 0.7, -1.0]]
C3 = [1.0, 0.5, 2.0]
L2 = [[-1.0, 1.0], [1.0, -1.0]]
F2 = [0.3, 1.2]


@pytest.fixture(scope="module")
def chain3():
    return BaseModel.finite_chain(L3, C3)


@pytest.fixture(scope="module")
def chain2():
    return BaseModel.finite_chain(L2, 1.0)


def test_criterion_01_mass_conservation(chain3, record):
    law = OffspringLaw([0.2, 0.1, 0.4, 0.3])
    start = time.perf_counter()
    H = solve_H(chain3, law, chain3.field(1.0), SolverMesh(1e-3, 2.0))
    elapsed = time.perf_counter() - start
    err = float(np.max(np.abs(H.values - 1.0)))
    ok = err <= 1e-5 and elapsed < 10
    assert record(1, "mass conservation", ok, f"max|H_t 1 - 1| = {err:.2e} (tol 1e-5), "
                                              f"{elapsed:.2f} s")


def test_criterion_02_iterate_bound(chain3, record):
    # the bound's base case needs iterate 0 below the solution, i.e. q_0 = 0
    law = OffspringLaw([0.0, 0.3, 0.5, 0.2])
    phi = chain3.field([0.2, 0.9, 0.5])
    t = 1.0
    start = time.perf_counter()
    H = solve_H(chain3, law, phi, SolverMesh(1e-3, t), "plain", keep_iterates=True,
                fixed_iters=11)
    elapsed = time.perf_counter() - start
    beta0 = constants(law, chain3.killing).beta0
    worst = -math.inf
    for n in range(11):
        gap = float(np.max(np.abs(H.iterates[n + 1][-1] - H.iterates[n][-1])))
        bound = (beta0 * t) ** n / math.factorial(n) * phi.sup_norm + 1e-6
        worst = max(worst, gap - bound)
    ok = worst <= 0 and elapsed < 10
    assert record(2, "Picard iterate bound", ok,
                  f"max(gap - bound) over n=0..10 = {worst:.3e} (<= 0), {elapsed:.2f} s")


def test_criterion_03_closed_form_binary(record):
    model = BaseModel.single_site(1.0)
    law = OffspringLaw.binary()
    start = time.perf_counter()
    worst = 0.0
    for theta in (0.5, 1.0, 2.0):
        h0 = math.exp(-theta)
        H = solve_H(model, law, model.field(h0), SolverMesh(1e-3, 2.0))
        rk = oracles.rk4(lambda _t, h: h * h - h, [h0], 2.0, 2000)[:, 0]
        closed = np.array([oracles.logistic_h(h0, s) for s in H.times])
        assert np.max(np.abs(rk - closed)) < 1e-10
        worst = max(worst, float(np.max(np.abs(H.values[:, 0] - closed))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 5
    assert record(3, "closed form q2=1", ok, f"max error {worst:.2e} (tol 1e-5), "
                                             f"{elapsed:.2f} s")


def test_criterion_04_laplace_identity(chain2, record):
    law = OffspringLaw.binary()
    f = chain2.field(F2)
    t = 1.0
    start = time.perf_counter()
    V = cumulant_V(chain2, law, f, SolverMesh(1e-3, t)).final
    # oracle: h' = (L - c) h + c h^2 from h(0) = exp(-f)
    rhs = oracles.ode_generating_rhs(L2, [1.0, 1.0], [0.0, 0.0, 1.0])
    h = oracles.rk4(rhs, np.exp(-np.array(F2)), t, 4000)[-1]
    assert np.max(np.abs(V.values + np.log(h))) < 1e-6
    lines, ok = [], True
    stream = SeededStream(20240401, (4,))
    for x in (0, 1):
        est = estimate_functional(chain2, law, Configuration([x]), t, f, "exponential",
                                  100_000, stream.child(x))
        ref = math.exp(-V.values[x])
        good = abs(est.mean - ref) <= 3 * est.stderr and est.stderr <= 0.005
        ok &= good
        lines.append(f"x={x}: {est.mean:.5f}+-{est.stderr:.5f} vs {ref:.5f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 60
    assert record(4, "Laplace identity", ok, "; ".join(lines) + f", {elapsed:.1f} s")


def test_criterion_05_first_moment(chain2, record):
    law = OffspringLaw.binary()
    f = chain2.field(F2)
    t = 1.0
    start = time.perf_counter()
    Q = solve_Q_picard(chain2, law, f, SolverMesh(1e-3, t), warn=False).final
    beta1 = constants(law, chain2.killing).beta1
    # oracle: expected mass semigroup exp(t (L + c (m - 1)))
    M = expm(t * (np.array(L2) + np.eye(2)))
    assert np.max(np.abs(Q.values - math.exp(-beta1 * t) * M @ np.array(F2))) < 1e-6
    stream = SeededStream(20240402, (5,))
    fk = solve_Q_feynman_kac(chain2, law, f, t, 100_000, stream.child(99))
    lines, ok = [], True
    for x in (0, 1):
        est = estimate_functional(chain2, law, Configuration([x]), t, f, "linear",
                                  100_000, stream.child(x)).scaled(math.exp(-beta1 * t))
        good = abs(est.mean - Q.values[x]) <= 3 * est.stderr
        agree = abs(fk[x].mean - Q.values[x]) <= 1e-5 + 3 * fk[x].stderr
        ok &= good and agree
        lines.append(f"x={x}: MC {est.mean:.5f}+-{est.stderr:.5f}, "
                     f"FK {fk[x].mean:.5f}+-{fk[x].stderr:.5f}, Picard {Q.values[x]:.5f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 60
    assert record(5, "first-moment identity", ok, "; ".join(lines) + f", {elapsed:.1f} s")


def test_criterion_06_branching_property(chain2, record):
    law = OffspringLaw.binary()
    f = chain2.field(F2)
    start = time.perf_counter()
    rep = verify_branching_property(chain2, law, Configuration([0]), Configuration([0]), 1.0,
                                    f, 100_000, SeededStream(20240403, (6,)))
    elapsed = time.perf_counter() - start
    ok = rep.passed and elapsed < 60
    assert record(6, "branching property", ok, f"z = {rep.z:+.3f} (|z| <= 3), "
                                               f"{elapsed:.1f} s")


def test_criterion_07_extinction_fixed_point(record):
    model = BaseModel.single_site(1.0)
    law = OffspringLaw([0.25, 0.0, 0.75])
    start = time.perf_counter()
    res = abs(float(invariant_residual(model, law, model.field(1 / 3), 1e-3).values[0]))
    off = abs(float(invariant_residual(model, law, model.field(0.5), 1e-3).values[0]))
    rhs = oracles.ode_generating_rhs([[0.0]], [1.0], [0.25, 0.0, 0.75])
    v6 = float(oracles.rk4(rhs, [0.0], 6.0, 6000)[-1, 0])
    est = estimate_functional(model, law, Configuration([0]), 6.0, None, "extinction",
                              100_000, SeededStream(20240404, (7,)))
    elapsed = time.perf_counter() - start
    ok = (res <= 1e-3 and off > 1e-2 and abs(est.mean - v6) <= 3 * est.stderr
          and elapsed < 60)
    assert record(7, "extinction fixed point", ok,
                  f"residual(1/3) = {res:.1e}, residual(1/2) = {off:.3f}, "
                  f"P(extinct by 6) = {est.mean:.5f}+-{est.stderr:.5f} vs {v6:.5f}, "
                  f"{elapsed:.1f} s")


def _torus_gap(n, dt):
    length, D, t = 2 * math.pi, 1.0, 0.5
    x = np.arange(n) * (length / n)
    f = 1 + 0.5 * np.sin(x)
    c = 1 + 0.5 * np.cos(x)
    q = [0.2, 0.3, 0.5]
    model = BaseModel.brownian_torus(D, length, n, c)
    V = cumulant_V(model, OffspringLaw(q), ScalarField(f, length), SolverMesh(dt, t)).final
    ref = oracles.torus_cumulant_mol(f, c, q, D, length, t)
    return float(np.max(np.abs(V.values - ref)))


def test_criterion_08_gradient_form(record):
    start = time.perf_counter()
    gaps = [_torus_gap(64, 0.01), _torus_gap(128, 0.005), _torus_gap(256, 0.0025)]
    elapsed = time.perf_counter() - start
    ratios = [gaps[0] / gaps[1], gaps[1] / gaps[2]]
    ok = gaps[0] <= 5e-3 and all(3 <= r <= 5 for r in ratios) and elapsed < 120
    assert record(8, "gradient-form consistency", ok,
                  f"sup diff {gaps[0]:.2e} at 64 nodes; halving ratios "
                  f"{ratios[0]:.3f}, {ratios[1]:.3f}, {elapsed:.1f} s")


def test_criterion_09_cumulant_closed_form(record):
    model = BaseModel.single_site()
    phi = MechanismPhi(a=1.0)
    start = time.perf_counter()
    worst = 0.0
    for theta in (0.5, 1.0, 2.0):
        N = solve_cumulant_N(model, phi, model.field(theta), SolverMesh(1e-3, 2.0))
        rk = oracles.rk4(lambda _t, v: -v * v, [theta], 2.0, 2000)[:, 0]
        closed = theta / (1 + theta * N.times)
        assert np.max(np.abs(rk - closed)) < 1e-10
        worst = max(worst, float(np.max(np.abs(N.values[:, 0] - closed))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 5
    assert record(9, "cumulant closed form", ok, f"max error {worst:.2e} (tol 1e-5), "
                                                 f"{elapsed:.2f} s")


def test_criterion_10_superprocess_approximation(record):
    model = BaseModel.single_site()
    phi = MechanismPhi(a=1.0)
    theta, t = 1.0, 1.0
    mu0 = MeasureState([0.0], [1.0])
    start = time.perf_counter()
    N = solve_cumulant_N(model, phi, model.field(theta), SolverMesh(1e-3, t)).final
    target = math.exp(-N.values[0])
    stream = SeededStream(20240405, (10,))
    errs, ses, bias = [], [], []
    for n in (50, 100, 200):
        est = superprocess_laplace(model, phi, mu0, t, model.field(theta), n, 1_000_000,
                                   stream.child(n))
        errs.append(abs(est.mean - target))
        ses.append(est.stderr)
        bias.append(abs(particle_laplace_exact(phi, 1.0, t, theta, n) - target))
    elapsed = time.perf_counter() - start
    banded = all(errs[i + 1] <= errs[i] + 3 * math.hypot(ses[i], ses[i + 1])
                 for i in range(2))
    exact_monotone = bias[0] > bias[1] > bias[2]
    ok = banded and exact_monotone and elapsed < 180
    assert record(10, "superprocess approximation", ok,
                  "MC |err| " + ", ".join(f"{e:.1e}(se {s:.1e})" for e, s in zip(errs, ses))
                  + "; exact bias " + ", ".join(f"{b:.2e}" for b in bias)
                  + f", {elapsed:.1f} s")


def test_criterion_11_composition(record):
    model = BaseModel.single_site()
    phi = MechanismPhi(a=1.0)
    law = OffspringLaw.binary()
    start = time.perf_counter()
    est = compose_discrete_over_measure(model, phi, law, 1.0, [MeasureState([0.0], [1.0])],
                                        1.0, model.field(1.0), 200, 10_000,
                                        SeededStream(20240406, (11,)),
                                        functional="mass")
    elapsed = time.perf_counter() - start
    rel = abs(est.mean / math.e - 1.0)
    ok = rel <= 0.1 and elapsed < 300
    assert record(11, "composition demo", ok, f"mean mass {est.mean:.4f}+-{est.stderr:.4f} "
                                              f"vs e = {math.e:.4f} (rel {rel:.3f}), "
                                              f"{elapsed:.2f} s")


CONFIG = """
[base_process]
kind = "finite_chain"
rate_matrix = [[-1.0, 1.0], [1.0, -1.0]]

[killing]
c = 1.0

[branching]
q = [0.1, 0.0, 0.9]

[monte_carlo]
replicas = 10000
master_seed = 987654321

[experiment]
t = 1.0
initial = [0, 1]
f = [0.3, 1.2]
"""


def test_criterion_12_determinism(tmp_path, record):
    cfg = tmp_path / "run.toml"
    cfg.write_text(CONFIG)
    start = time.perf_counter()
    bundles = []
    for i, workers in enumerate((1, 8, 1)):
        out = tmp_path / f"out{i}"
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(out),
                         "--workers", str(workers)]) == 0
        bundles.append({p.name: p.read_bytes() for p in sorted(out.iterdir())
                        if p.name != "timing.json"})
    elapsed = time.perf_counter() - start
    csvs = sorted(n for n in bundles[0] if n.endswith(".csv"))
    ok = bool(csvs) and bundles[0] == bundles[1] == bundles[2] and elapsed < 60
    assert record(12, "determinism", ok, f"{len(bundles[0])} files ({', '.join(csvs)}) "
                                         f"byte-identical at 1, 8, 1 workers, "
                                         f"{elapsed:.1f} s")
