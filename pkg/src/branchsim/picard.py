"""Picard iteration for Duhamel-form evolution equations on a uniform mesh.

Every solver in the package has the shape

    v_t = S_t phi + int_0^t S_{t-u} F(v_u) du

with ``S`` a (killed) linear semigroup and ``F`` a pointwise reaction.  The
table of ``v`` at mesh times is refined by substituting the previous
iterate into the right-hand side until the sup-norm change over the whole
table drops below the tolerance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .base_process import BaseModel
from .config_space import ScalarField

TABLE_KINDS = ("H_of_phi", "V_of_f", "Q_of_f", "N_of_f")


class NonConvergenceError(RuntimeError):
    """Picard iteration hit ``max_iters`` above tolerance."""


@dataclass(frozen=True)
class SolverMesh:
    dt: float
    t_max: float
    picard_tol: float = 1e-11
    max_iters: int = 500

    def __post_init__(self):
        if not self.dt > 0 or not self.t_max >= 0:
            raise ValueError("mesh needs dt > 0 and t_max >= 0")
        if not self.picard_tol > 0 or self.max_iters < 1:
            raise ValueError("picard_tol must be > 0 and max_iters >= 1")
        k = self.t_max / self.dt
        if abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ValueError("t_max must be a multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


@dataclass(eq=False)
class SemigroupTable:
    """Values of ``t -> v_t`` at the mesh times, one row per time."""

    times: np.ndarray
    values: np.ndarray
    kind: str
    length: float | None = None
    meta: dict = field(default_factory=dict)
    iterates: list | None = None

    def __post_init__(self):
        if self.kind not in TABLE_KINDS:
            raise ValueError(f"unknown table kind {self.kind!r}")
        if self.values.shape[0] != self.times.size:
            raise ValueError("one row of values per mesh time")

    @property
    def n_states(self) -> int:
        return self.values.shape[1]

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a mesh time")
        return i

    def at(self, t: float) -> ScalarField:
        return ScalarField(self.values[self.index_of(t)], self.length)

    @property
    def final(self) -> ScalarField:
        return ScalarField(self.values[-1], self.length)

    def rows(self):
        """``(t, state_index_or_coordinate, value)`` triples in mesh order."""
        if self.length is None:
            coords = np.arange(self.n_states)
        else:
            coords = np.arange(self.n_states) * (self.length / self.n_states)
        for i, t in enumerate(self.times):
            for j in range(self.n_states):
                yield float(t), coords[j].item(), float(self.values[i, j])


class DuhamelEngine:
    """Mesh-level convolution with a killed semigroup (see ``duhamel_operators``)."""

    def __init__(self, model: BaseModel, dt: float, extra_killing=0.0):
        self.model = model
        self.dt = dt
        self.P, self.Wa, self.Wb = model.duhamel_operators(dt, extra_killing)

    def free(self, phi: np.ndarray, n_steps: int) -> np.ndarray:
        """Rows ``P^i phi`` for ``i = 0 .. n_steps``."""
        out = np.empty((n_steps + 1, phi.size))
        out[0] = phi
        for i in range(1, n_steps + 1):
            out[i] = self.P @ out[i - 1]
        return out

    def convolve(self, g: np.ndarray) -> np.ndarray:
        """Rows ``int_0^{t_i} S_{t_i - u} g(u) du`` (product trapezoid)."""
        out = np.zeros_like(g)
        # transposed products let every step be one matrix-vector pass
        ga = g @ self.Wa.T
        gb = g @ self.Wb.T
        PT = self.P.T
        acc = np.zeros(g.shape[1])
        for i in range(1, g.shape[0]):
            acc = acc @ PT + ga[i - 1] + gb[i]
            out[i] = acc
        return out

    def step(self, free: np.ndarray, reaction, prev: np.ndarray) -> np.ndarray:
        return free + self.convolve(reaction(prev))


def picard_solve(engine: DuhamelEngine, free: np.ndarray, reaction, start: np.ndarray,
                 mesh: SolverMesh, keep_iterates: bool = False, bound=None,
                 fixed_iters: int | None = None):
    """Iterate ``v <- free + conv(reaction(v))`` from ``start``.

    Returns ``(values, info, iterates)`` where ``info`` holds the iteration
    count, the sup-norm change per iteration and, when ``bound`` is given,
    the theoretical bound ``bound(n)`` on the ``n``-th change.  With
    ``fixed_iters`` exactly that many iterations run and no convergence is
    required.
    """
    cur = start
    diffs, bounds = [], []
    iterates = [cur] if keep_iterates else None
    for n in range(fixed_iters or mesh.max_iters):
        nxt = engine.step(free, reaction, cur)
        d = float(np.max(np.abs(nxt - cur)))
        diffs.append(d)
        if bound is not None:
            bounds.append(bound(n))
        if keep_iterates:
            iterates.append(nxt)
        cur = nxt
        if not math.isfinite(d):
            break
        if d < mesh.picard_tol or (fixed_iters and n + 1 == fixed_iters):
            info = {"iterations": n + 1, "residual": d, "diff_trace": diffs,
                    "bound_trace": bounds, "converged": d < mesh.picard_tol}
            return cur, info, iterates
    raise NonConvergenceError(
        f"Picard iteration did not converge in {mesh.max_iters} iterations "
        f"(last change {diffs[-1]:.3e} > {mesh.picard_tol:.1e})"
    )
