"""Monte Carlo simulation of the branching particle system.

Each particle moves by the base process, is killed at rate ``c(X_s)``
(thinning against ``c_bar = sup c``) and is then replaced by offspring drawn
from the law.  All live particles of a block of replicas advance together,
one event per round, in struct-of-arrays form.

Every particle owns a counter-based random stream keyed by its genealogy:
roots get ``derive(derive(seed_key, replica), i)`` and the ``j``-th child of
a particle gets ``derive(parent_key, j)``.  A particle's trajectory is thus
a function of its label alone, so results do not depend on how replicas
are grouped into blocks or spread over worker processes.  Terminal
particles are sorted by ``(replica, key)`` before any reduction.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .base_process import BaseModel, jump_tables, next_states
from .config_space import Configuration, ScalarField, eval_multiplicative
from .mechanism import OffspringLaw, draw_counts
from .stats import Estimate, InvalidEstimateError
from .streams import SeededStream, derive, uniforms

DEFAULT_CAP = 1_000_000
BLOCK_REPLICAS = 4096
DRAWS_PER_EVENT = 6
CHILD_COUNTER_START = 2  # draws 0 and 1 of a child place it (displacement)
FUNCTIONALS = ("exponential", "linear", "multiplicative", "size", "extinction")


class CapExceededError(RuntimeError):
    """A replica's live population passed the cap."""


@dataclass(frozen=True)
class Particle:
    position: float
    lineage: tuple
    birth_time: float


@dataclass
class ForestBatch:
    """Terminal particles of a batch of replicas in canonical order."""

    n_replicas: int
    replica: np.ndarray
    key: np.ndarray
    position: np.ndarray
    birth: np.ndarray
    capped: np.ndarray
    labels: np.ndarray | None = None

    def sizes(self) -> np.ndarray:
        return np.bincount(self.replica, minlength=self.n_replicas)

    def configuration(self, r: int, integer_points: bool = False) -> Configuration:
        sel = self.replica == r
        pts = self.position[sel]
        return Configuration(pts.astype(np.int64) if integer_points else pts)


def _ranks(counts: np.ndarray) -> np.ndarray:
    """``concatenate([arange(k) for k in counts])`` without the Python loop."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    starts = np.cumsum(counts) - counts
    return np.arange(total, dtype=np.int64) - np.repeat(starts, counts)


def _canonical(batch: dict) -> dict:
    order = np.lexsort((batch["key"], batch["replica"]))
    return {k: (v[order] if isinstance(v, np.ndarray) and v.shape[:1] == order.shape else v)
            for k, v in batch.items()}


class _Motion:
    """Per-model quantities the event loop needs, precomputed once."""

    def __init__(self, model: BaseModel):
        self.kind = model.kind
        self.killing = model.killing
        self.c_bar = model.killing.sup_norm
        if model.kind == "finite_chain":
            self.rates, self.cum = jump_tables(model.rate_matrix)
        self.diffusion = model.diffusion
        self.length = model.length
        self.n = model.n_states

    def jump_rate(self, pos: np.ndarray) -> np.ndarray:
        if self.kind == "finite_chain":
            return self.rates[pos.astype(np.int64)]
        return np.zeros(pos.size)

    def diffuse(self, pos, dt, u1, u2):
        if self.kind != "brownian_torus" or self.diffusion == 0:
            return pos
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return np.mod(pos + np.sqrt(2.0 * self.diffusion * dt) * z, self.length)


def _place_children(law, motion, key, ctr, pos):
    """Displaced birth positions from each child's first two draws."""
    if law.displacement.is_local:
        return pos
    u = uniforms(key, ctr, 2)
    return np.mod(pos + law.displacement.draw(u[:, 0], u[:, 1]), motion.length)


def run_block(model: BaseModel, law: OffspringLaw, roots: list, t: float,
              replica_keys: np.ndarray, replica_ids: np.ndarray, cap: int,
              horizons: np.ndarray | None = None, with_labels: bool = False) -> dict:
    """Simulate one block of replicas to time ``t`` (or per-root horizons).

    ``roots[k]`` holds the root positions of replica ``replica_ids[k]``.
    Returns unsorted arrays of terminal particles plus the capped mask.
    """
    motion = _Motion(model)
    n_rep = len(roots)
    sizes = np.array([len(r) for r in roots], dtype=np.int64)
    local = np.repeat(np.arange(n_rep), sizes)
    idx = _ranks(sizes)
    rep = local.astype(np.int64)
    key = derive(replica_keys[local], idx.astype(np.uint64)) if rep.size else np.zeros(0, np.uint64)
    ctr = np.zeros(rep.size, dtype=np.uint64)
    pos = np.concatenate([np.asarray(r, dtype=float) for r in roots]) if rep.size else np.zeros(0)
    now = np.zeros(rep.size)
    birth = np.zeros(rep.size)
    end = np.full(rep.size, float(t)) if horizons is None else np.repeat(horizons, sizes)
    labels = None
    if with_labels:
        labels = np.empty(rep.size, dtype=object)
        labels[:] = [(int(i),) for i in idx]
    capped = np.zeros(n_rep, dtype=bool)
    done = {"replica": [], "key": [], "position": [], "birth": [], "labels": []}
    rows_n = model.n_states
    rows_len = model.field_length

    while rep.size:
        u = uniforms(key, ctr, DRAWS_PER_EVENT)
        ctr = ctr + np.uint64(DRAWS_PER_EVENT)
        jr = motion.jump_rate(pos)
        lam = motion.c_bar + jr
        with np.errstate(divide="ignore"):
            tau = np.where(lam > 0, -np.log(u[:, 0]) / np.where(lam > 0, lam, 1.0), np.inf)
        finish = now + tau >= end
        step = np.where(finish, end - now, tau)
        pos = motion.diffuse(pos, step, u[:, 4], u[:, 5])
        now = np.where(finish, end, now + tau)

        if finish.any():
            done["replica"].append(rep[finish])
            done["key"].append(key[finish])
            done["position"].append(pos[finish])
            done["birth"].append(birth[finish])
            if with_labels:
                done["labels"].append(labels[finish])
        go = ~finish
        is_jump = go & (u[:, 1] * lam < jr)
        if is_jump.any():
            pos[is_jump] = next_states(motion.cum, pos[is_jump].astype(np.int64), u[is_jump, 2])
        prop = go & ~is_jump
        if motion.c_bar > 0 and prop.any():
            cval = motion.killing(pos[prop])
            acc = np.zeros(rep.size, dtype=bool)
            acc[prop] = u[prop, 2] * motion.c_bar < cval
        else:
            acc = np.zeros(rep.size, dtype=bool)
        survive = go & ~acc

        # offspring of the accepted deaths
        d = np.flatnonzero(acc)
        if d.size:
            rows = law.rows_at(pos[d], rows_n, rows_len)
            k = draw_counts(np.array(rows), u[d, 3])
            parent = np.repeat(d, k)
            j = _ranks(k)
            c_key = derive(key[parent], j.astype(np.uint64))
            c_ctr = np.full(parent.size, CHILD_COUNTER_START, dtype=np.uint64)
            c_pos = _place_children(law, motion, c_key, np.zeros(parent.size, np.uint64),
                                    pos[parent])
            c_labels = None
            if with_labels:
                c_labels = np.empty(parent.size, dtype=object)
                c_labels[:] = [labels[p] + (int(i),) for p, i in zip(parent, j)]
        else:
            parent = np.zeros(0, np.int64)

        rep_new = np.concatenate([rep[survive], rep[parent]])
        key = np.concatenate([key[survive], c_key if parent.size else np.zeros(0, np.uint64)])
        ctr = np.concatenate([ctr[survive], c_ctr if parent.size else np.zeros(0, np.uint64)])
        pos = np.concatenate([pos[survive], c_pos if parent.size else np.zeros(0)])
        birth = np.concatenate([birth[survive], now[parent]])
        end = np.concatenate([end[survive], end[parent]])
        now = np.concatenate([now[survive], now[parent]])
        if with_labels:
            labels = np.concatenate([labels[survive], c_labels if parent.size
                                     else np.empty(0, dtype=object)])
        rep = rep_new

        # population cap on the live particles of each replica
        if rep.size > cap:
            over = (np.bincount(rep, minlength=n_rep) > cap) & ~capped
            if over.any():
                capped |= over
                keep = ~capped[rep]
                rep, key, ctr, pos = rep[keep], key[keep], ctr[keep], pos[keep]
                birth, end, now = birth[keep], end[keep], now[keep]
                if with_labels:
                    labels = labels[keep]

    out = {k: (np.concatenate(v) if v else None) for k, v in done.items()}
    if out["replica"] is None:
        out = {"replica": np.zeros(0, np.int64), "key": np.zeros(0, np.uint64),
               "position": np.zeros(0), "birth": np.zeros(0),
               "labels": np.empty(0, dtype=object) if with_labels else None}
    keep = ~capped[out["replica"]]
    res = {k: (v[keep] if v is not None else None) for k, v in out.items()}
    res["replica"] = replica_ids[res["replica"]]
    res["capped"] = capped
    return res


def _block_task(args):
    return run_block(*args)


def simulate_replicas(model: BaseModel, law: OffspringLaw, mu0: Configuration, t: float,
                      replicas: int, stream: SeededStream, cap: int = DEFAULT_CAP,
                      workers: int = 1, with_labels: bool = False,
                      block: int = BLOCK_REPLICAS) -> ForestBatch:
    """Terminal particles of ``replicas`` independent forests started at ``mu0``."""
    if not law.markovian:
        raise ValueError("simulation requires a Markovian law (sum_k q_k = 1)")
    if cap < mu0.size:
        raise ValueError("cap must be at least the initial population")
    if t < 0:
        raise ValueError("t must be >= 0")
    law.rows_on(model.n_states)
    roots = np.asarray(mu0.points, dtype=float)
    ids = np.arange(replicas, dtype=np.int64)
    keys = stream.child_keys(ids)
    tasks = []
    for lo in range(0, replicas, block):
        hi = min(replicas, lo + block)
        tasks.append((model, law, [roots] * (hi - lo), t, keys[lo:hi], ids[lo:hi], cap,
                      None, with_labels))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_block_task, tasks))
    else:
        parts = [_block_task(a) for a in tasks]
    return _merge(parts, replicas, with_labels)


def _merge(parts, replicas, with_labels) -> ForestBatch:
    batch = {
        "replica": np.concatenate([p["replica"] for p in parts]) if parts else np.zeros(0, np.int64),
        "key": np.concatenate([p["key"] for p in parts]) if parts else np.zeros(0, np.uint64),
        "position": np.concatenate([p["position"] for p in parts]) if parts else np.zeros(0),
        "birth": np.concatenate([p["birth"] for p in parts]) if parts else np.zeros(0),
    }
    if with_labels:
        batch["labels"] = np.concatenate([p["labels"] for p in parts])
    batch = _canonical(batch)
    capped = np.concatenate([p["capped"] for p in parts]) if parts else np.zeros(0, bool)
    return ForestBatch(replicas, batch["replica"], batch["key"], batch["position"],
                       batch["birth"], capped, batch.get("labels"))


def simulate_forest(model: BaseModel, law: OffspringLaw, mu0: Configuration, t: float,
                    cap: int, stream: SeededStream) -> Configuration:
    """One forest (replica 0 of ``stream``); the configuration alive at ``t``."""
    batch = simulate_replicas(model, law, mu0, t, 1, stream, cap)
    if batch.capped[0]:
        raise CapExceededError(f"population passed the cap of {cap}")
    return batch.configuration(0, integer_points=model.kind != "brownian_torus")


def surviving_particles(model: BaseModel, law: OffspringLaw, mu0: Configuration, t: float,
                        cap: int, stream: SeededStream) -> list[Particle]:
    """Like ``simulate_forest`` but keeps positions, Ulam-Harris labels and birth times."""
    batch = simulate_replicas(model, law, mu0, t, 1, stream, cap, with_labels=True)
    if batch.capped[0]:
        raise CapExceededError(f"population passed the cap of {cap}")
    order = sorted(range(batch.labels.size), key=lambda i: batch.labels[i])
    return [Particle(float(batch.position[i]), batch.labels[i], float(batch.birth[i]))
            for i in order]


def replica_values(batch: ForestBatch, f: ScalarField | None, functional: str) -> np.ndarray:
    """Per-replica functional values (capped replicas excluded), in replica order."""
    if functional not in FUNCTIONALS:
        raise ValueError(f"functional must be one of {FUNCTIONALS}")
    R = batch.n_replicas
    if functional in ("size", "extinction"):
        vals = batch.sizes().astype(float)
        if functional == "extinction":
            vals = (vals == 0).astype(float)
    elif functional == "multiplicative":
        if not f.in_unit_interval():
            raise ValueError("multiplicative functionals need 0 <= phi <= 1")
        vals = np.ones(R)
        np.multiply.at(vals, batch.replica, f(batch.position))
    else:
        s = np.bincount(batch.replica, weights=f(batch.position), minlength=R)
        if functional == "exponential":
            if np.any(f.values < 0):
                raise ValueError("exponential functionals need f >= 0")
            s = np.exp(-s)
        vals = s
    return vals[~batch.capped]


def estimate_functional(model: BaseModel, law: OffspringLaw, mu0: Configuration, t: float,
                        f: ScalarField | None, functional: str, replicas: int,
                        stream: SeededStream, cap: int = DEFAULT_CAP,
                        workers: int = 1) -> Estimate:
    """Monte Carlo estimate of ``E F(mu_t)`` for ``F`` one of ``FUNCTIONALS``.

    ``exponential`` is ``exp(-<mu_t, f>)``, ``linear`` is ``<mu_t, f>``,
    ``multiplicative`` is the product of ``f`` over particles.
    """
    batch = simulate_replicas(model, law, mu0, t, replicas, stream, cap, workers)
    vals = replica_values(batch, f, functional)
    est = Estimate.from_samples(vals, int(batch.capped.sum()))
    return est.check()


def exact_at_zero(mu0: Configuration, f: ScalarField, functional: str) -> float:
    if functional == "exponential":
        return eval_multiplicative(f.like(np.exp(-f.values)), mu0)
    if functional == "multiplicative":
        return eval_multiplicative(f, mu0)
    if functional == "linear":
        return float(np.sum(f(mu0.points))) if mu0.size else 0.0
    if functional == "size":
        return float(mu0.size)
    return float(mu0.size == 0)


@dataclass(frozen=True)
class BranchingReport:
    z: float
    combined: Estimate
    first: Estimate
    second: Estimate

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 3.0


def verify_branching_property(model: BaseModel, law: OffspringLaw, mu: Configuration,
                              nu: Configuration, t: float, f: ScalarField, replicas: int,
                              stream: SeededStream, cap: int = DEFAULT_CAP,
                              workers: int = 1) -> BranchingReport:
    """z-score of ``log E e_f(mu_t | mu+nu) - log E e_f(mu_t | mu) - log E e_f(mu_t | nu)``.

    The three estimates use independent child streams; the standard error
    comes from the delta method on the logarithms.
    """
    both = estimate_functional(model, law, mu + nu, t, f, "exponential", replicas,
                               stream.child(0), cap, workers)
    a = estimate_functional(model, law, mu, t, f, "exponential", replicas,
                            stream.child(1), cap, workers)
    b = estimate_functional(model, law, nu, t, f, "exponential", replicas,
                            stream.child(2), cap, workers)
    diff = math.log(both.mean) - math.log(a.mean) - math.log(b.mean)
    se = math.sqrt(sum((e.stderr / e.mean) ** 2 for e in (both, a, b)))
    if se == 0:
        z = 0.0 if abs(diff) < 1e-12 else math.copysign(math.inf, diff)
    else:
        z = diff / se
    return BranchingReport(z, both, a, b)
