"""Base Markov motions: semigroup actions, killed semigroups and path sampling.

Three concrete models share one interface: a single site (no motion), a
finite continuous-time chain given by its rate matrix, and Brownian motion
on a 1-D periodic interval discretized on a uniform grid (generator
``D * Laplacian`` by central differences).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import expm

from .config_space import DomainError, ScalarField
from .stats import Estimate
from .streams import SeededStream, derive, uniforms

KINDS = ("single_site", "finite_chain", "brownian_torus")
DEFAULT_CN_DT = 1e-3


@dataclass(frozen=True, eq=False)
class BaseModel:
    kind: str
    killing: ScalarField
    rate_matrix: np.ndarray | None = None
    diffusion: float = 0.0
    length: float | None = None
    grid: int = 0
    cn_dt: float = DEFAULT_CN_DT

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown base process kind {self.kind!r}")
        if self.kind == "finite_chain":
            L = np.array(self.rate_matrix, dtype=float)
            if L.ndim != 2 or L.shape[0] != L.shape[1]:
                raise ValueError("rate matrix must be square")
            off = L - np.diag(np.diag(L))
            if np.any(off < 0):
                raise ValueError("rate matrix off-diagonal entries must be >= 0")
            if np.max(np.abs(L.sum(axis=1))) > 1e-12 * max(1.0, np.abs(L).max()):
                raise ValueError("rate matrix rows must sum to zero")
            L.flags.writeable = False
            object.__setattr__(self, "rate_matrix", L)
        elif self.kind == "brownian_torus":
            if not (self.diffusion >= 0 and self.length and self.length > 0 and self.grid >= 3):
                raise ValueError("torus needs diffusion >= 0, length > 0 and grid >= 3")
        if self.killing.n != self.n_states:
            raise DomainError("killing field does not match the state space")
        if self.killing.is_torus != (self.kind == "brownian_torus"):
            raise DomainError("killing field lives on the wrong kind of space")
        if np.any(self.killing.values < 0):
            raise DomainError("killing rate must be >= 0")

    # construction helpers
    @classmethod
    def single_site(cls, c: float = 0.0) -> "BaseModel":
        return cls("single_site", ScalarField.constant(c))

    @classmethod
    def finite_chain(cls, rate_matrix, c=0.0) -> "BaseModel":
        L = np.asarray(rate_matrix, dtype=float)
        cf = np.broadcast_to(np.asarray(c, dtype=float), (L.shape[0],))
        return cls("finite_chain", ScalarField(cf), rate_matrix=L)

    @classmethod
    def brownian_torus(cls, diffusion: float, length: float, grid: int, c=0.0,
                       cn_dt: float = DEFAULT_CN_DT) -> "BaseModel":
        cf = np.broadcast_to(np.asarray(c, dtype=float), (grid,))
        return cls("brownian_torus", ScalarField(cf, length), diffusion=float(diffusion),
                   length=float(length), grid=int(grid), cn_dt=cn_dt)

    @property
    def n_states(self) -> int:
        if self.kind == "single_site":
            return 1
        if self.kind == "finite_chain":
            return self.rate_matrix.shape[0]
        return self.grid

    @property
    def field_length(self) -> float | None:
        return self.length if self.kind == "brownian_torus" else None

    def field(self, values) -> ScalarField:
        """A field on this model's state space (scalars broadcast)."""
        v = np.broadcast_to(np.asarray(values, dtype=float), (self.n_states,))
        return ScalarField(v, self.field_length)

    def with_killing(self, c) -> "BaseModel":
        cf = c if isinstance(c, ScalarField) else self.field(c)
        return replace(self, killing=cf)

    @property
    def grid_step(self) -> float:
        return self.length / self.grid

    def generator(self) -> np.ndarray:
        """Matrix of the (unkilled) generator on the state space / grid."""
        if self.kind == "single_site":
            return np.zeros((1, 1))
        if self.kind == "finite_chain":
            return np.array(self.rate_matrix)
        n = self.grid
        lap = -2.0 * np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
        lap[0, -1] = lap[-1, 0] = 1.0
        return self.diffusion / self.grid_step ** 2 * lap

    def killed_generator(self, extra=0.0) -> np.ndarray:
        """``L - diag(c + extra)``."""
        return self.generator() - np.diag(self.killing.values + extra)

    def duhamel_operators(self, dt: float, extra_killing=0.0):
        """One-step propagator and quadrature weights for Duhamel integrals.

        Returns ``(P, Wa, Wb)`` such that for the killed generator ``A``

            I(t + dt) = P I(t) + Wa g(t) + Wb g(t + dt)

        approximates ``I(t) = int_0^t e^{A(t-u)} g(u) du``.  On finite spaces
        ``P = e^{A dt}`` and the weights integrate the exponential exactly
        against the piecewise-linear interpolant of ``g`` (product
        trapezoid).  On the torus ``P`` is one Crank-Nicolson step and the
        weights are the plain trapezoid ``(dt/2) P`` and ``(dt/2) I``.
        """
        A = self.killed_generator(extra_killing)
        n = A.shape[0]
        if self.kind == "brownian_torus":
            eye = np.eye(n)
            P = np.linalg.solve(eye - 0.5 * dt * A, eye + 0.5 * dt * A)
            return P, 0.5 * dt * P, 0.5 * dt * eye
        M = np.zeros((3 * n, 3 * n))
        M[:n, :n] = A
        M[:n, n:2 * n] = np.eye(n)
        M[n:2 * n, 2 * n:] = np.eye(n)
        E = expm(M * dt)
        P = E[:n, :n]
        F1 = E[:n, n:2 * n]
        Wb = E[:n, 2 * n:] / dt
        return P, F1 - Wb, Wb

    def _cn_steps(self, A: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
        k = max(1, math.ceil(t / self.cn_dt - 1e-9))
        h = t / k
        eye = np.eye(A.shape[0])
        step = np.linalg.solve(eye - 0.5 * h * A, eye + 0.5 * h * A)
        for _ in range(k):
            v = step @ v
        return v

    def propagate(self, A: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
        if t < 0:
            raise ValueError("t must be >= 0")
        if t == 0:
            return np.array(v, dtype=float)
        if self.kind == "brownian_torus":
            return self._cn_steps(A, t, np.asarray(v, dtype=float))
        return expm(A * t) @ v


def apply_semigroup(model: BaseModel, t: float, f: ScalarField) -> ScalarField:
    """``T_t f``: matrix exponential (finite) or Crank-Nicolson (torus)."""
    _check_field(model, f)
    if model.kind == "single_site":
        return f
    return f.like(model.propagate(model.generator(), t, f.values))


def apply_killed_semigroup(model: BaseModel, t: float, f: ScalarField) -> ScalarField:
    """``T_t^c f(x) = E^x[exp(-int_0^t c(X_s) ds) f(X_t)]``."""
    _check_field(model, f)
    c = model.killing.values
    if np.all(c == c[0]):
        # constant killing factors out of the expectation
        return f.like(math.exp(-c[0] * t) * apply_semigroup(model, t, f).values)
    return f.like(model.propagate(model.killed_generator(), t, f.values))


def _check_field(model: BaseModel, f: ScalarField) -> None:
    if f.n != model.n_states or f.is_torus != (model.kind == "brownian_torus"):
        raise DomainError("field does not live on the model's state space")


def jump_tables(L: np.ndarray):
    """Total jump rate per state and cumulative embedded-chain rows."""
    rates = -np.diag(L)
    jumps = np.where(rates[:, None] > 0, L / np.where(rates > 0, rates, 1.0)[:, None], 0.0)
    np.fill_diagonal(jumps, 0.0)
    cum = np.cumsum(jumps, axis=1)
    return rates, cum


def next_states(cum: np.ndarray, states: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Jump targets by inversion of the embedded chain rows."""
    rows = cum[states]
    rows[:, -1] = np.inf
    return (rows <= u[:, None]).sum(axis=1)


def sample_path(model: BaseModel, x0, dt: float, n_steps: int, stream: SeededStream) -> np.ndarray:
    """Positions at times ``0, dt, ..., n_steps * dt``.

    Finite chains are simulated exactly (exponential holding times) and
    observed on the grid; Brownian motion uses exact Gaussian increments of
    variance ``2 D dt`` wrapped onto ``[0, length)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    times = dt * np.arange(n_steps + 1)
    if model.kind == "single_site":
        return np.zeros(n_steps + 1)
    if model.kind == "brownian_torus":
        inc = math.sqrt(2.0 * model.diffusion * dt) * stream.normal(n_steps)
        path = float(x0) + np.concatenate([[0.0], np.cumsum(inc)])
        return np.mod(path, model.length)
    rates, cum = jump_tables(model.rate_matrix)
    out = np.empty(n_steps + 1)
    state, now, k = int(x0), 0.0, 0
    while k <= n_steps:
        u = stream.uniform(2)
        hold = -math.log(u[0]) / rates[state] if rates[state] > 0 else math.inf
        nxt = now + hold
        while k <= n_steps and times[k] < nxt:
            out[k] = state
            k += 1
        if k > n_steps:
            break
        state = int(next_states(cum, np.array([state]), u[1:])[0])
        now = nxt
    return out


def path_exponential_average(model: BaseModel, x0, t: float, f: ScalarField,
                             potential: ScalarField, replicas: int,
                             stream: SeededStream, n_steps: int = 200) -> Estimate:
    """Monte Carlo for ``E^x0[exp(int_0^t V(X_s) ds) f(X_t)]``.

    On finite spaces the time integral is exact (constant over holding
    intervals); on the torus it is the trapezoid rule over ``n_steps``
    exact Brownian increments.
    """
    _check_field(model, f)
    R = int(replicas)
    keys = derive(np.full(R, stream.key, dtype=np.uint64), np.arange(R, dtype=np.uint64))
    counters = np.zeros(R, dtype=np.uint64)
    if model.kind == "brownian_torus":
        h = t / n_steps
        x = np.full(R, float(x0))
        v_prev = potential(x)
        integral = np.zeros(R)
        for _ in range(n_steps):
            u = uniforms(keys, counters, 2)
            counters += np.uint64(2)
            z = np.sqrt(-2.0 * np.log(u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
            x = np.mod(x + math.sqrt(2.0 * model.diffusion * h) * z, model.length)
            v_now = potential(x)
            integral += 0.5 * h * (v_prev + v_now)
            v_prev = v_now
        return Estimate.from_samples(np.exp(integral) * f(x))
    if model.kind == "single_site":
        vals = np.full(R, math.exp(potential.values[0] * t) * f.values[0])
        return Estimate.from_samples(vals)
    rates, cum = jump_tables(model.rate_matrix)
    state = np.full(R, int(x0), dtype=np.int64)
    now = np.zeros(R)
    integral = np.zeros(R)
    active = np.arange(R)
    while active.size:
        u = uniforms(keys[active], counters[active], 2)
        counters[active] += np.uint64(2)
        s = state[active]
        r = rates[s]
        with np.errstate(divide="ignore"):
            hold = np.where(r > 0, -np.log(u[:, 0]) / np.where(r > 0, r, 1.0), np.inf)
        left = t - now[active]
        step = np.minimum(hold, left)
        integral[active] += potential.values[s] * step
        jumped = hold < left
        now[active] += step
        idx = active[jumped]
        if idx.size:
            state[idx] = next_states(cum, s[jumped], u[jumped, 1])
        active = idx
    return Estimate.from_samples(np.exp(integral) * f.values[state])
