"""The nonlinear branching semigroup ``H_t`` and the cumulant ``V_t``.

``H_t phi`` solves

    H_t phi = T_t^c phi + int_0^t T_{t-u}^c ( c * B(H_u phi) ) du,

where ``T^c`` is the killed semigroup and ``B`` the offspring kernel acting
on ``[0, 1]``-valued functions.  ``H_t phi(x)`` is the expectation of the
product of ``phi`` over the particles alive at ``t`` when the system starts
from one particle at ``x``.
"""
from __future__ import annotations

import math

import numpy as np

from .base_process import BaseModel
from .config_space import DomainError, ScalarField
from .mechanism import OffspringLaw, constants, displacement_matrix
from .picard import DuhamelEngine, SemigroupTable, SolverMesh, picard_solve

H_FLOOR = 1e-300
SCHEMES = ("auto", "plain", "primed")


def branching_reaction(model: BaseModel, law: OffspringLaw):
    """``h -> c * B(h)`` on tables of shape ``(n_times, n_states)``."""
    n = model.n_states
    c = model.killing.values
    law.rows_on(n)
    D = displacement_matrix(law.displacement, n, model.field_length)

    def reaction(h: np.ndarray) -> np.ndarray:
        h = np.clip(h, 0.0, 1.0)
        if D is not None:
            h = np.clip(h @ D.T, 0.0, 1.0)
        return c * law.generating(h, n)

    return reaction


def _check_phi(model: BaseModel, phi: ScalarField) -> None:
    if phi.n != model.n_states:
        raise DomainError("phi does not live on the model's state space")
    if not phi.in_unit_interval():
        raise DomainError("phi must take values in [0, 1]")


def _table(values, mesh, kind, model, meta, iterates=None) -> SemigroupTable:
    return SemigroupTable(mesh.times, values, kind, model.field_length, meta, iterates)


def picard_step(model: BaseModel, law: OffspringLaw, prev: SemigroupTable,
                phi: ScalarField) -> SemigroupTable:
    """One refinement ``H^{n+1} = T^c phi + int T^c (c B H^n)`` of a table."""
    _check_phi(model, phi)
    times = prev.times
    dt = float(times[1] - times[0]) if times.size > 1 else 1.0
    engine = DuhamelEngine(model, dt)
    free = engine.free(phi.values, times.size - 1)
    new = engine.step(free, branching_reaction(model, law), prev.values)
    return SemigroupTable(times, new, "H_of_phi", model.field_length, dict(prev.meta))


def initial_table(model: BaseModel, phi: ScalarField, mesh: SolverMesh) -> SemigroupTable:
    """The zeroth plain iterate ``H^0_t phi = T^c_t phi``."""
    engine = DuhamelEngine(model, mesh.dt)
    return _table(engine.free(phi.values, mesh.n_steps), mesh, "H_of_phi", model, {})


def solve_H(model: BaseModel, law: OffspringLaw, phi: ScalarField, mesh: SolverMesh,
            scheme: str = "auto", keep_iterates: bool = False,
            fixed_iters: int | None = None) -> SemigroupTable:
    """Solve for ``t -> H_t phi`` on the mesh by Picard iteration.

    ``plain`` starts from ``T^c phi`` and produces increasing iterates;
    ``primed`` starts from the map applied to the constant path ``phi`` and
    keeps ``H 1 = 1`` at every iterate for Markovian laws.  ``auto`` picks
    ``primed`` for Markovian laws.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    _check_phi(model, phi)
    if scheme == "auto":
        scheme = "primed" if law.markovian else "plain"
    beta0 = constants(law, model.killing).beta0
    bt = beta0 * mesh.t_max
    norm = phi.sup_norm
    engine = DuhamelEngine(model, mesh.dt)
    reaction = branching_reaction(model, law)
    free = engine.free(phi.values, mesh.n_steps)
    if scheme == "plain":
        start = free

        def bound(n):
            return bt ** n / math.factorial(n) * norm
    else:
        start = free + engine.convolve(reaction(np.broadcast_to(phi.values, free.shape)))

        def bound(n):
            return norm * (2 * bt ** (n + 1) / math.factorial(n + 1)
                           + bt ** (n + 2) / math.factorial(n + 2))

    values, info, iterates = picard_solve(engine, free, reaction, start, mesh,
                                          keep_iterates, bound, fixed_iters)
    clip = float(max(0.0, -values.min(), values.max() - 1.0))
    values = np.clip(values, 0.0, 1.0)
    meta = {"scheme": scheme, "dt": mesh.dt, "t_max": mesh.t_max,
            "picard_tol": mesh.picard_tol, "beta0": beta0, "range_clip": clip, **info}
    return _table(values, mesh, "H_of_phi", model, meta, iterates)


def cumulant_V(model: BaseModel, law: OffspringLaw, f: ScalarField,
               mesh: SolverMesh, scheme: str = "auto") -> SemigroupTable:
    """``V_t f = -ln H_t(exp(-f))`` on the mesh, for ``f >= 0``."""
    if np.any(f.values < 0):
        raise DomainError("cumulant needs f >= 0")
    H = solve_H(model, law, f.like(np.exp(-f.values)), mesh, scheme)
    V = -np.log(np.clip(H.values, H_FLOOR, 1.0))
    cap = f.sup_norm + mesh.times * model.killing.sup_norm
    meta = dict(H.meta)
    meta["bound_ok"] = bool(np.all(V <= cap[:, None] + 1e-9))
    return _table(V, mesh, "V_of_f", model, meta)


def invariant_residual(model: BaseModel, law: OffspringLaw, v: ScalarField,
                       probe_dt: float, substeps: int = 4) -> ScalarField:
    """``(H_{probe_dt} v - v) / probe_dt``; vanishes at invariant functions."""
    if not probe_dt > 0:
        raise ValueError("probe_dt must be positive")
    mesh = SolverMesh(probe_dt / substeps, probe_dt, picard_tol=1e-15)
    H = solve_H(model, law, v, mesh)
    return v.like((H.values[-1] - v.values) / probe_dt)
