"""Measure-valued branching: cumulant equation, particle approximation, composition.

For a mechanism

    Phi(l) = -b l - a l^2 + sum_i n_i (1 - exp(-l s_i) - l s_i)

the cumulant ``N_t f`` solves ``v_t = P_t f + int_0^t P_{t-u} Phi(v_u) du``
and ``E exp(-<X_t, f>) = exp(-<mu_0, N_t f>)`` for the superprocess ``X``
started at ``mu_0``.

The particle approximation uses particles of mass ``1/n``.  Each particle
moves by ``Y`` and, at total rate ``2 a n + b + sum n_i s_i + sum n_i / n``,
either dies (rate ``a n + b + sum n_i s_i``), splits in two (rate ``a n``) or
is replaced by ``1 + round(s_i n)`` particles (rate ``n_i / n``).  Its
log-Laplace functional converges to the solution above as ``n`` grows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .base_process import BaseModel
from .config_space import Configuration, DomainError, ScalarField
from .mechanism import OffspringLaw
from .particles import (DEFAULT_CAP, CapExceededError, run_block, replica_values,
                        simulate_replicas)
from .picard import DuhamelEngine, SemigroupTable, SolverMesh, picard_solve
from .stats import Estimate
from .streams import SeededStream

KENDALL_BLOCK = 4096


@dataclass(frozen=True)
class MechanismPhi:
    a: float = 0.0
    b: float = 0.0
    jumps: tuple = ()

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("quadratic coefficient a must be >= 0")
        if self.b < 0:
            raise ValueError("linear coefficient b must be >= 0 (shift it into the motion)")
        jumps = tuple((float(s), float(r)) for s, r in self.jumps)
        for s, r in jumps:
            if not s > 0 or r < 0:
                raise ValueError("jump atoms need size > 0 and rate >= 0")
        object.__setattr__(self, "jumps", jumps)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s for s, _ in self.jumps])

    @property
    def rates(self) -> np.ndarray:
        return np.array([r for _, r in self.jumps])

    @property
    def jump_free(self) -> bool:
        return not self.jumps or not np.any(self.rates > 0)

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = -self.b * lam - self.a * lam * lam
        for s, r in self.jumps:
            out = out + r * (-np.expm1(-lam * s) - lam * s)
        return out

    def shift(self, bound: float) -> float:
        """A ``k`` making ``Phi(l) + k l`` nondecreasing on ``[0, bound]``."""
        return self.b + 2.0 * self.a * bound + float(np.sum(self.sizes * self.rates))

    def particle_law(self, n_scale: int) -> tuple[float, OffspringLaw]:
        """Branching rate and offspring law of the mass-``1/n`` particle system."""
        n = float(n_scale)
        comp = float(np.sum(self.sizes * self.rates))
        extra = [(1 + int(round(s * n)), r / n) for s, r in self.jumps if r > 0]
        rate = 2.0 * self.a * n + self.b + comp + sum(w for _, w in extra)
        kmax = max([2] + [k for k, _ in extra])
        q = np.zeros(kmax + 1)
        if rate == 0:
            q[1] = 1.0
            return 0.0, OffspringLaw(q)
        q[0] = (self.a * n + self.b + comp) / rate
        q[2] += self.a * n / rate
        for k, w in extra:
            q[k] += w / rate
        q /= q.sum()
        return rate, OffspringLaw(q)


@dataclass(frozen=True, eq=False)
class MeasureState:
    points: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.points, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if p.shape != w.shape:
            raise ValueError("one weight per atom")
        if np.any(w <= 0):
            raise ValueError("atom weights must be positive")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_configuration(cls, mu: Configuration, n_scale: int) -> "MeasureState":
        return cls(mu.points.astype(float), np.full(mu.size, 1.0 / n_scale))

    @property
    def total_mass(self) -> float:
        return math.fsum(self.weights)

    def integrate(self, f: ScalarField) -> float:
        if self.points.size == 0:
            return 0.0
        return math.fsum(self.weights * f(self.points))

    def particle_roots(self, n_scale: int) -> np.ndarray:
        """``round(weight * n)`` unit particles per atom."""
        counts = np.rint(self.weights * n_scale).astype(np.int64)
        return np.repeat(self.points, counts)

    def to_list(self) -> list:
        return [[p.item(), w.item()] for p, w in zip(self.points, self.weights)]


def _motion(model: BaseModel) -> BaseModel:
    return model.with_killing(0.0)


def solve_cumulant_N(model: BaseModel, phi: MechanismPhi, f: ScalarField,
                     mesh: SolverMesh) -> SemigroupTable:
    """``N_t f`` by Picard iteration on the shifted form

        v_t = P^k_t f + int_0^t P^k_{t-u} (Phi(v_u) + k v_u) du

    with ``P^k`` the motion killed at the constant rate ``k = phi.shift(|f|)``;
    the shifted reaction is nondecreasing on ``[0, |f|]`` so the iterates stay
    in that range.
    """
    if np.any(f.values < 0):
        raise DomainError("cumulant needs f >= 0")
    M = f.sup_norm
    k = phi.shift(M)
    engine = DuhamelEngine(_motion(model), mesh.dt, extra_killing=k)

    def reaction(v):
        v = np.clip(v, 0.0, M)
        return phi(v) + k * v

    free = engine.free(f.values, mesh.n_steps)
    values, info, _ = picard_solve(engine, free, reaction, free, mesh)
    meta = {"dt": mesh.dt, "t_max": mesh.t_max, "picard_tol": mesh.picard_tol,
            "shift": k, **info}
    return SemigroupTable(mesh.times, values, "N_of_f", model.field_length, meta)


def kendall_parameters(birth: float, death: float, t: float) -> tuple[float, float]:
    """``(p0, rho)`` of a linear birth-death process from one individual.

    ``P(Z_t = 0) = p0`` and ``P(Z_t = k) = (1 - p0)(1 - rho) rho^(k-1)``.
    """
    if t == 0 or (birth == 0 and death == 0):
        return 0.0, 0.0
    if abs(birth - death) < 1e-12 * max(birth, death):
        x = birth * t / (1.0 + birth * t)
        return x, x
    E = math.exp((birth - death) * t)
    den = birth * E - death
    return death * (E - 1.0) / den, birth * (E - 1.0) / den


def kendall_counts(n0: np.ndarray, birth: float, death: float, t: np.ndarray | float,
                   gen: np.random.Generator) -> np.ndarray:
    """Population at ``t`` of birth-death processes started from ``n0``."""
    n0 = np.asarray(n0, dtype=np.int64)
    t = np.broadcast_to(np.asarray(t, dtype=float), n0.shape)
    if birth == 0 and death == 0:
        return n0.copy()
    if abs(birth - death) < 1e-12 * max(birth, death):
        p0 = rho = birth * t / (1.0 + birth * t)
    else:
        E = np.exp((birth - death) * t)
        den = birth * E - death
        p0 = death * (E - 1.0) / den
        rho = birth * (E - 1.0) / den
    alive = gen.binomial(n0, 1.0 - p0)
    extra = np.zeros_like(alive)
    pos = alive > 0
    extra[pos] = gen.negative_binomial(alive[pos], 1.0 - rho[pos])
    return alive + extra


def _kendall_ok(model: BaseModel, phi: MechanismPhi) -> bool:
    return model.kind == "single_site" and phi.jump_free


def approx_superprocess_path(model: BaseModel, phi: MechanismPhi, mu0: MeasureState,
                             t: float, n_scale: int, stream: SeededStream,
                             cap: int = DEFAULT_CAP) -> MeasureState:
    """One path of the mass-``1/n`` particle approximation, observed at ``t``."""
    if n_scale < 1:
        raise ValueError("n_scale must be >= 1")
    roots = mu0.particle_roots(n_scale)
    if _kendall_ok(model, phi):
        gen = stream.generator()
        n = int(kendall_counts(np.array([roots.size]), phi.a * n_scale,
                               phi.a * n_scale + phi.b, t, gen)[0])
        if n > cap:
            raise CapExceededError(f"population passed the cap of {cap}")
        return MeasureState(np.zeros(n), np.full(n, 1.0 / n_scale))
    rate, law = phi.particle_law(n_scale)
    batch = simulate_replicas(model.with_killing(rate), law, Configuration(roots), t, 1,
                              stream, cap)
    if batch.capped[0]:
        raise CapExceededError(f"population passed the cap of {cap}")
    return MeasureState(batch.position, np.full(batch.position.size, 1.0 / n_scale))


def superprocess_laplace(model: BaseModel, phi: MechanismPhi, mu0: MeasureState, t: float,
                         f: ScalarField, n_scale: int, replicas: int, stream: SeededStream,
                         cap: int = DEFAULT_CAP, workers: int = 1,
                         functional: str = "exponential") -> Estimate:
    """Estimate ``E exp(-<X_t, f>)`` (or ``E <X_t, f>`` with ``functional='linear'``)."""
    roots = mu0.particle_roots(n_scale)
    if _kendall_ok(model, phi):
        counts = np.empty(replicas, dtype=np.int64)
        for lo in range(0, replicas, KENDALL_BLOCK):
            hi = min(replicas, lo + KENDALL_BLOCK)
            gen = stream.child(lo // KENDALL_BLOCK).generator()
            counts[lo:hi] = kendall_counts(np.full(hi - lo, roots.size), phi.a * n_scale,
                                           phi.a * n_scale + phi.b, t, gen)
        mass = counts * (f.values[0] / n_scale)
        capped = counts > cap
        vals = np.exp(-mass) if functional == "exponential" else mass
        return Estimate.from_samples(vals[~capped], int(capped.sum())).check()
    rate, law = phi.particle_law(n_scale)
    batch = simulate_replicas(model.with_killing(rate), law, Configuration(roots), t,
                              replicas, stream, cap, workers)
    vals = replica_values(batch, f.like(f.values / n_scale), functional)
    return Estimate.from_samples(vals, int(batch.capped.sum())).check()


def particle_laplace_exact(phi: MechanismPhi, mass0: float, t: float, theta: float,
                           n_scale: int) -> float:
    """Exact ``E exp(-theta <X_t, 1>)`` of the single-site jump-free approximation."""
    p0, rho = kendall_parameters(phi.a * n_scale, phi.a * n_scale + phi.b, t)
    s = math.exp(-theta / n_scale)
    u = p0 + (1.0 - p0) * (1.0 - rho) * s / (1.0 - rho * s)
    return u ** int(round(mass0 * n_scale))


def composition_beta_bound(law: OffspringLaw, c: float) -> float:
    """Upper end ``c + q_o - c q_o`` of the admissible range for the composed process."""
    qo = float(law.mean_offspring[0])
    return c + qo - c * qo


def compose_discrete_over_measure(model: BaseModel, phi: MechanismPhi, law: OffspringLaw,
                                  c: float, mu0: list, t: float, f: ScalarField,
                                  n_scale: int, replicas: int, stream: SeededStream,
                                  functional: str = "exponential",
                                  cap: int = DEFAULT_CAP) -> Estimate:
    """Discrete branching whose particles are superprocess clusters.

    Each cluster evolves as an independent superprocess approximation; at
    rate ``c`` it is destroyed and replaced by ``k`` copies of its current
    measure, ``k`` drawn from the (constant) law.  Estimates
    ``E exp(-sum_i <X_t^i, f>)`` or, with ``functional='mass'``, the mean
    total mass.
    """
    if not law.is_constant or not law.markovian or not law.displacement.is_local:
        raise ValueError("composition needs a constant, Markovian, local offspring law")
    if c < 0:
        raise ValueError("c must be >= 0")
    if functional not in ("exponential", "mass"):
        raise ValueError("functional must be 'exponential' or 'mass'")
    if _kendall_ok(model, phi):
        vals, capped = _compose_single_site(phi, law, c, mu0, t, f, n_scale, replicas,
                                            stream, functional, cap)
    else:
        vals, capped = _compose_generic(model, phi, law, c, mu0, t, f, n_scale, replicas,
                                        stream, functional, cap)
    return Estimate.from_samples(vals[~capped], int(capped.sum())).check()


def _compose_single_site(phi, law, c, mu0, t, f, n_scale, replicas, stream, functional, cap):
    birth, death = phi.a * n_scale, phi.a * n_scale + phi.b
    n_init = np.array([m.particle_roots(n_scale).size for m in mu0], dtype=np.int64)
    qcum = np.cumsum(law.q[0])
    qcum[-1] = 1.0
    totals = np.zeros(replicas, dtype=np.int64)
    capped = np.zeros(replicas, dtype=bool)
    for lo in range(0, replicas, KENDALL_BLOCK):
        hi = min(replicas, lo + KENDALL_BLOCK)
        gen = stream.child(lo // KENDALL_BLOCK).generator()
        rep = np.repeat(np.arange(lo, hi), n_init.size)
        count = np.tile(n_init, hi - lo)
        now = np.zeros(rep.size)
        while rep.size:
            tau = gen.exponential(1.0, rep.size) / c if c > 0 else np.full(rep.size, np.inf)
            finish = now + tau >= t
            h = np.where(finish, t - now, tau)
            count = kendall_counts(count, birth, death, h, gen)
            np.add.at(totals, rep[finish], count[finish])
            go = ~finish
            k = np.searchsorted(qcum, gen.random(int(go.sum())), side="right")
            rep = np.repeat(rep[go], k)
            count = np.repeat(count[go], k)
            now = np.repeat(now[go] + tau[go], k)
            if rep.size:
                live = np.bincount(rep - lo, weights=count, minlength=hi - lo)
                over = live > cap
                capped[lo:hi] |= over
                keep = ~capped[rep]
                rep, count, now = rep[keep], count[keep], now[keep]
    mass = totals / n_scale
    vals = np.exp(-f.values[0] * mass) if functional == "exponential" else mass
    return vals, capped


def _compose_generic(model, phi, law, c, mu0, t, f, n_scale, replicas, stream, functional, cap):
    rate, plaw = phi.particle_law(n_scale)
    smodel = model.with_killing(rate)
    qcum = np.cumsum(law.q[0])
    qcum[-1] = 1.0
    vals = np.zeros(replicas)
    capped = np.zeros(replicas, dtype=bool)
    for r in range(replicas):
        rs = stream.child(r)
        clusters = [(m.particle_roots(n_scale), 0.0, rs.child(i)) for i, m in enumerate(mu0)]
        acc = 0.0
        while clusters:
            roots, start, cs = clusters.pop()
            tau = cs.exponential(1)[0] / c if c > 0 else math.inf
            h = min(tau, t - start)
            out = run_block(smodel, plaw, [roots], h, cs.child_keys([0]), np.array([0]), cap)
            if out["capped"][0]:
                capped[r] = True
                break
            pos = out["position"][np.lexsort((out["key"],))]
            if start + tau >= t:
                acc += math.fsum(f(pos)) / n_scale if functional == "exponential" \
                    else pos.size / n_scale
                continue
            k = int(np.searchsorted(qcum, cs.uniform(1)[0], side="right"))
            for j in range(k):
                clusters.append((pos, start + tau, cs.child(j + 1)))
        vals[r] = math.exp(-acc) if functional == "exponential" else acc
    return vals, capped
