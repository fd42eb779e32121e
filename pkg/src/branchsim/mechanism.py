"""Local branching kernels built from offspring-count laws.

A law gives, at every state, probabilities ``q_k`` of leaving ``k``
children (``k = 0 .. K_max``); children are placed at the parent position
plus i.i.d. displacements.  The kernel acts on ``[0, 1]``-valued functions
through the offspring generating function and on linear functionals through
the mean offspring number ``q_o``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config_space import Configuration, DomainError, ScalarField
from .streams import SeededStream

MARKOV_TOL = 1e-12
DEFAULT_KMAX = 8

DISPLACEMENT_KINDS = ("none", "gaussian", "uniform_ball")


@dataclass(frozen=True)
class Displacement:
    kind: str = "none"
    parameter: float = 0.0

    def __post_init__(self):
        if self.kind not in DISPLACEMENT_KINDS:
            raise ValueError(f"unknown displacement kind {self.kind!r}")
        if self.kind != "none" and not self.parameter > 0:
            raise ValueError("displacement parameter must be positive")

    @property
    def is_local(self) -> bool:
        return self.kind == "none"

    def draw(self, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
        """Displacements from two uniform arrays."""
        if self.kind == "gaussian":
            return self.parameter * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        if self.kind == "uniform_ball":
            return self.parameter * (2.0 * u1 - 1.0)
        return np.zeros_like(u1)

    def quadrature(self, n_nodes: int = 401) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and weights of ``E g(xi)`` for the displacement ``xi``."""
        if self.kind == "gaussian":
            # midpoint rule on +-8 sigma; the integrand is piecewise linear
            edges = np.linspace(-8.0, 8.0, n_nodes + 1)
            z = 0.5 * (edges[1:] + edges[:-1])
            w = np.exp(-0.5 * z * z)
            return self.parameter * z, w / w.sum()
        if self.kind == "uniform_ball":
            edges = np.linspace(-1.0, 1.0, n_nodes + 1)
            z = 0.5 * (edges[1:] + edges[:-1])
            return self.parameter * z, np.full(n_nodes, 1.0 / n_nodes)
        return np.zeros(1), np.ones(1)


@dataclass(frozen=True, eq=False)
class OffspringLaw:
    """Offspring-count probabilities, constant or one row per state/grid node.

    ``q`` has shape ``(K_max + 1,)`` for a state-independent law or
    ``(n_nodes, K_max + 1)``; on the torus rows are attached to grid nodes
    and interpolated linearly in between.
    """

    q: np.ndarray
    displacement: Displacement = Displacement()

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim == 1:
            q = q[None, :]
        if q.ndim != 2 or q.shape[1] < 1:
            raise ValueError("q must be a vector or a matrix of probabilities")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ValueError("offspring probabilities must be finite and >= 0")
        if np.any(q.sum(axis=1) > 1.0 + MARKOV_TOL):
            raise ValueError("offspring probabilities must sum to at most 1")
        q = q.copy()
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    @classmethod
    def binary(cls, p0: float = 0.0) -> "OffspringLaw":
        """Die childless with probability ``p0``, otherwise split in two."""
        return cls([p0, 0.0, 1.0 - p0])

    @property
    def k_max(self) -> int:
        return self.q.shape[1] - 1

    @property
    def n_nodes(self) -> int:
        return self.q.shape[0]

    @property
    def is_constant(self) -> bool:
        return self.n_nodes == 1 or bool(np.all(self.q == self.q[0]))

    @property
    def total(self) -> np.ndarray:
        return self.q.sum(axis=1)

    @property
    def markovian(self) -> bool:
        return bool(np.all(np.abs(self.total - 1.0) <= MARKOV_TOL))

    @property
    def mean_offspring(self) -> np.ndarray:
        """``q_o = sum_k k q_k`` per row."""
        return self.q @ np.arange(self.k_max + 1)

    def rows_on(self, n: int) -> np.ndarray:
        """The law as an ``(n, K+1)`` array on an ``n``-point space or grid."""
        if self.n_nodes == 1:
            return np.broadcast_to(self.q, (n, self.k_max + 1))
        if self.n_nodes != n:
            raise DomainError(f"law has {self.n_nodes} rows, space has {n} points")
        return self.q

    def rows_at(self, points: np.ndarray, n: int, length: float | None) -> np.ndarray:
        """Offspring probabilities at arbitrary points of an ``n``-point space."""
        points = np.asarray(points)
        if self.n_nodes == 1:
            return np.broadcast_to(self.q, (points.size, self.k_max + 1))
        rows = self.rows_on(n)
        if length is None:
            return rows[points.astype(np.int64)]
        s = np.mod(points.astype(float), length) * (n / length)
        j = np.floor(s).astype(np.int64)
        w = (s - j)[:, None]
        j %= n
        return (1.0 - w) * rows[j] + w * rows[(j + 1) % n]

    def generating(self, h: np.ndarray, n: int | None = None) -> np.ndarray:
        """``sum_k q_k h^k`` pointwise (Horner), ``h`` an array of node values."""
        h = np.asarray(h, dtype=float)
        rows = self.rows_on(h.shape[-1] if n is None else n)
        out = np.zeros_like(h) + rows[:, -1]
        for k in range(self.k_max - 1, -1, -1):
            out = out * h + rows[:, k]
        return out


@dataclass(frozen=True)
class MechanismConstants:
    beta1: float
    beta0: float
    q_bar: float
    supercritical: bool
    killing_below_threshold: bool

    @property
    def moment_hypotheses(self) -> bool:
        """``beta1 > 1`` and ``c < beta1 / (beta1 - 1)`` everywhere."""
        return self.supercritical and self.killing_below_threshold


def displacement_matrix(disp: Displacement, n: int, length: float | None) -> np.ndarray | None:
    """Matrix of the single-child averaging operator on grid values.

    ``None`` stands for the identity (no displacement).  Off-grid values use
    the same periodic linear interpolation as ``ScalarField``.
    """
    if disp.is_local:
        return None
    if length is None:
        raise DomainError("displaced offspring need a continuous (torus) state space")
    y, w = disp.quadrature()
    h = length / n
    x = np.arange(n) * h
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for yq, wq in zip(y, w):
        s = np.mod(x + yq, length) / h
        j = np.floor(s).astype(np.int64)
        frac = s - j
        j %= n
        np.add.at(mat, (rows, j), wq * (1.0 - frac))
        np.add.at(mat, (rows, (j + 1) % n), wq * frac)
    return mat


def _averaged(law: OffspringLaw, values: np.ndarray, length: float | None) -> np.ndarray:
    mat = displacement_matrix(law.displacement, values.size, length)
    return values if mat is None else mat @ values


def apply_to_multiplicative(law: OffspringLaw, h: ScalarField) -> ScalarField:
    """``x -> q_0(x) + sum_k q_k(x) (D h)(x)^k`` for ``0 <= h <= 1``."""
    if not h.in_unit_interval():
        raise DomainError("apply_to_multiplicative needs 0 <= h <= 1")
    dh = np.clip(_averaged(law, h.values, h.length), 0.0, 1.0)
    return h.like(law.generating(dh))


def apply_to_linear(law: OffspringLaw, f: ScalarField) -> ScalarField:
    """``x -> q_o(x) (D f)(x)``: the kernel applied to ``<., f>``."""
    qo = law.mean_offspring
    if law.n_nodes == 1:
        qo = np.full(f.n, qo[0])
    elif law.n_nodes != f.n:
        raise DomainError("law and field live on different spaces")
    return f.like(qo * _averaged(law, f.values, f.length))


def constants(law: OffspringLaw, c: ScalarField) -> MechanismConstants:
    if np.any(c.values < 0):
        raise DomainError("killing rate must be >= 0")
    q_bar = float(np.max(law.mean_offspring))
    beta1 = q_bar
    beta0 = c.sup_norm * beta1
    supercritical = beta1 > 1.0
    below = bool(supercritical and np.all(c.values < beta1 / (beta1 - 1.0)))
    return MechanismConstants(beta1, beta0, q_bar, supercritical, below)


def draw_counts(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Offspring counts by inversion; ``rows`` are (Markovian) probability rows."""
    cum = np.cumsum(rows, axis=1)
    cum[:, -1] = 1.0
    return (cum[:, :-1] <= u[:, None]).sum(axis=1)


def sample_offspring(law: OffspringLaw, x, stream: SeededStream,
                     n: int | None = None, length: float | None = None) -> Configuration:
    """One draw of the offspring configuration of a particle dying at ``x``.

    ``n`` is the number of states (or grid nodes) of the space, needed only
    for state-dependent laws; ``length`` is the torus length for displaced
    children.
    """
    if not law.markovian:
        raise ValueError("sampling requires a Markovian law (sum_k q_k = 1)")
    rows = law.rows_at(np.array([x]), n or law.n_nodes, length)
    k = int(draw_counts(np.array(rows), stream.uniform(1))[0])
    if k == 0:
        return Configuration.empty()
    if law.displacement.is_local:
        return Configuration(np.full(k, x))
    u = stream.uniform(2 * k)
    pos = np.mod(float(x) + law.displacement.draw(u[:k], u[k:]), length)
    return Configuration(pos)
