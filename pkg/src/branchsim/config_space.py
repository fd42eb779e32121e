"""Finite configurations of a state space and the functionals built on them.

A configuration is a finite multiset of points of the state space ``E``; the
empty configuration plays the role of the zero measure.  Points are either
integer state indices (finite spaces) or real coordinates on a 1-D periodic
domain ``[0, length)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """A field or point lies outside the domain an operation requires."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A bounded function on the state space.

    For a finite space ``values[i]`` is the value at state ``i``.  For the
    torus ``values[j]`` is the value at grid node ``j * length / n`` and
    off-grid points are evaluated by periodic linear interpolation.
    """

    values: np.ndarray
    length: float | None = None

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if v.ndim != 1 or v.size == 0:
            raise ValueError("field values must be a non-empty 1-D array")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        if self.length is not None and self.length <= 0:
            raise ValueError("torus length must be positive")
        object.__setattr__(self, "values", _readonly(v))

    @classmethod
    def constant(cls, value: float, n: int = 1, length: float | None = None) -> "ScalarField":
        return cls(np.full(n, float(value)), length)

    @classmethod
    def from_function(cls, fn, n: int, length: float) -> "ScalarField":
        """Sample ``fn`` on the ``n``-node grid of the torus of given length."""
        return cls(fn(np.arange(n) * (length / n)), length)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def is_torus(self) -> bool:
        return self.length is not None

    @property
    def grid(self) -> np.ndarray:
        if self.length is None:
            return np.arange(self.n, dtype=float)
        return np.arange(self.n) * (self.length / self.n)

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def in_unit_interval(self) -> bool:
        return bool(np.all(self.values >= 0.0) and np.all(self.values <= 1.0))

    def like(self, values) -> "ScalarField":
        """A field on the same space with new grid values."""
        return ScalarField(values, self.length)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points)
        if self.length is None:
            idx = pts.astype(np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= self.n):
                raise DomainError("state index out of range")
            return self.values[idx]
        h = self.length / self.n
        s = np.mod(pts.astype(float), self.length) / h
        j = np.floor(s).astype(np.int64)
        w = s - j
        j %= self.n
        return (1.0 - w) * self.values[j] + w * self.values[(j + 1) % self.n]

    def __repr__(self) -> str:
        space = "finite" if self.length is None else f"torus(L={self.length:g})"
        return f"ScalarField({space}, n={self.n}, sup={self.sup_norm:.6g})"


@dataclass(frozen=True, eq=False)
class Configuration:
    """A finite multiset of points; the empty configuration is the zero measure.

    Point order is storage detail only: every functional below is symmetric.
    """

    points: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        p = np.asarray(self.points)
        if p.ndim == 0:
            p = p.reshape(1)
        if p.ndim != 1:
            raise ValueError("configuration points must be a flat sequence")
        if p.size and not np.all(np.isfinite(p.astype(float))):
            raise ValueError("configuration points must be finite")
        object.__setattr__(self, "points", _readonly(p))

    @classmethod
    def empty(cls) -> "Configuration":
        return cls(np.empty(0))

    @property
    def size(self) -> int:
        return int(self.points.size)

    @property
    def is_zero(self) -> bool:
        return self.points.size == 0

    def __len__(self) -> int:
        return self.size

    def __add__(self, other: "Configuration") -> "Configuration":
        return add_configurations(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Configuration):
            return NotImplemented
        return self.size == other.size and bool(
            np.array_equal(np.sort(self.points), np.sort(other.points))
        )

    __hash__ = None

    def counts(self, n_states: int) -> np.ndarray:
        """Occupation numbers per state (finite spaces only)."""
        return np.bincount(self.points.astype(np.int64), minlength=n_states)

    def to_list(self) -> list:
        return [p.item() for p in self.points]

    def __repr__(self) -> str:
        return f"Configuration({self.to_list()!r})"


def validate_points(mu: Configuration, field: ScalarField) -> None:
    """Check that every point of ``mu`` lies in the space ``field`` lives on."""
    if mu.is_zero:
        return
    if field.length is None:
        p = mu.points
        if np.any(p != np.floor(p)) or p.min() < 0 or p.max() >= field.n:
            raise DomainError("configuration has points outside the finite state space")
    else:
        p = mu.points.astype(float)
        if p.min() < 0 or p.max() >= field.length:
            raise DomainError("configuration has points outside [0, length)")


def eval_multiplicative(phi: ScalarField, mu: Configuration) -> float:
    """Product of ``phi`` over the points of ``mu``; 1 on the empty configuration."""
    if not phi.in_unit_interval():
        raise DomainError("multiplicative functions need 0 <= phi <= 1")
    if mu.is_zero:
        return 1.0
    # sorted product: the result must not depend on point order
    return float(np.prod(np.sort(phi(mu.points))))


def eval_linear(f: ScalarField, mu: Configuration) -> float:
    """``<mu, f>``, the sum of ``f`` over the points of ``mu``."""
    if mu.is_zero:
        return 0.0
    return math.fsum(f(mu.points))


def eval_exponential(f: ScalarField, mu: Configuration) -> float:
    """``exp(-<mu, f>)`` for ``f >= 0``."""
    if np.any(f.values < 0):
        raise DomainError("exponential functionals need f >= 0")
    return float(np.exp(-eval_linear(f, mu)))


def add_configurations(mu: Configuration, nu: Configuration) -> Configuration:
    """Multiset union, i.e. the sum of the two counting measures."""
    if mu.is_zero:
        return nu
    if nu.is_zero:
        return mu
    return Configuration(np.concatenate([mu.points, nu.points]))
