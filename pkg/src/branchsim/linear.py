"""The linear perturbed semigroup ``Q_t`` and the first-moment operator.

``Q_t f`` solves

    r_t = T_t^{c+b1} f + int_0^t T_{t-u}^{c+b1} ( c * q_o * D r_u ) du

with ``b1 = sup q_o``.  ``exp(b1 t) Q_t f(x)`` is the expected value of
``<mu_t, f>`` for the branching system started from one particle at ``x``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .base_process import BaseModel, path_exponential_average
from .config_space import ScalarField
from .mechanism import OffspringLaw, constants, displacement_matrix
from .picard import DuhamelEngine, SemigroupTable, SolverMesh, picard_solve
from .stats import Estimate
from .streams import SeededStream


class HypothesisWarning(UserWarning):
    """The moment hypotheses (b1 > 1, c < b1/(b1-1), constant c) fail."""


@dataclass(frozen=True)
class PerturbationSpec:
    base_killing: ScalarField
    beta1: float
    kernel_mass: np.ndarray
    hypotheses: bool
    constant_killing: bool

    @property
    def kernel_sub_markovian(self) -> bool:
        return bool(np.all(self.kernel_mass <= 1.0 + 1e-12))


def perturbation_spec(model: BaseModel, law: OffspringLaw) -> PerturbationSpec:
    consts = constants(law, model.killing)
    c = model.killing.values
    qo = law.mean_offspring if law.n_nodes > 1 else np.full(c.size, law.mean_offspring[0])
    mass = c / (c + consts.beta1) * qo
    return PerturbationSpec(model.killing.like(c + consts.beta1), consts.beta1, mass,
                            consts.moment_hypotheses, bool(np.all(c == c[0])))


def _linear_reaction(model: BaseModel, law: OffspringLaw):
    n = model.n_states
    c = model.killing.values
    qo = law.mean_offspring if law.n_nodes > 1 else np.full(n, law.mean_offspring[0])
    weight = c * qo
    D = displacement_matrix(law.displacement, n, model.field_length)

    def reaction(r: np.ndarray) -> np.ndarray:
        return weight * (r if D is None else r @ D.T)

    return reaction


def solve_Q_picard(model: BaseModel, law: OffspringLaw, f: ScalarField,
                   mesh: SolverMesh, warn: bool = True) -> SemigroupTable:
    spec = perturbation_spec(model, law)
    if warn and not spec.hypotheses:
        warnings.warn("moment hypotheses fail (need b1 > 1 and c < b1/(b1-1)); "
                      "solving anyway", HypothesisWarning, stacklevel=2)
    engine = DuhamelEngine(model, mesh.dt, extra_killing=spec.beta1)
    free = engine.free(f.values, mesh.n_steps)
    values, info, _ = picard_solve(engine, free, _linear_reaction(model, law), free, mesh)
    meta = {"dt": mesh.dt, "t_max": mesh.t_max, "picard_tol": mesh.picard_tol,
            "beta1": spec.beta1, "hypotheses": spec.hypotheses, **info}
    return SemigroupTable(mesh.times, values, "Q_of_f", model.field_length, meta)


def solve_Q_feynman_kac(model: BaseModel, law: OffspringLaw, f: ScalarField, t: float,
                        replicas: int, stream: SeededStream, states=None,
                        n_steps: int = 200) -> list[Estimate]:
    """``Q_t f(x) = e^{-(c+b1)t} E^x[exp(int_0^t c q_o(X_s) ds) f(X_t)]`` by Monte Carlo.

    Requires constant killing and children placed at the parent position.
    One estimate per starting state (default: every state / grid node).
    """
    spec = perturbation_spec(model, law)
    if not spec.constant_killing:
        raise ValueError("the Feynman-Kac form needs a constant killing rate")
    if not law.displacement.is_local:
        raise ValueError("the Feynman-Kac form needs local (undisplaced) offspring")
    c = float(model.killing.values[0])
    n = model.n_states
    qo = law.mean_offspring if law.n_nodes > 1 else np.full(n, law.mean_offspring[0])
    potential = model.field(c * qo)
    factor = math.exp(-(c + spec.beta1) * t)
    xs = range(n) if states is None else states
    out = []
    for x in xs:
        x0 = x if model.kind != "brownian_torus" else x * model.grid_step
        est = path_exponential_average(model, x0, t, f, potential, replicas,
                                       stream.child(int(x)), n_steps)
        out.append(est.scaled(factor))
    return out


def moment_operator(model: BaseModel, law: OffspringLaw, f: ScalarField, t: float,
                    mesh: SolverMesh | None = None) -> ScalarField:
    """``M_t f = e^{b1 t} Q_t f``: the expected ``<mu_t, f>`` from one particle."""
    if t == 0:
        return f
    if mesh is None or abs(mesh.t_max - t) > 1e-12:
        dt = 1e-3 if mesh is None else mesh.dt
        mesh = SolverMesh(t / math.ceil(t / dt - 1e-9), t)
    Q = solve_Q_picard(model, law, f, mesh, warn=False)
    beta1 = Q.meta["beta1"]
    return f.like(math.exp(beta1 * t) * Q.values[-1])
