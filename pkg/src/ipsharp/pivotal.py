"""T-pivotality of candidate points and the Russo / influence integrals.

A point (x, t, u) is T-pivotal when, from all ones on the box,
  (a) an A-atom (x, t, u) added to the timeline leaves X_t(x) = 1, and
  (b) forcing X_t(x) to 0 gives X_T(0) = 0 while forcing it to 1 gives 1.
The forcing overrides the injected atom, so (b) can be read off the
augmented timeline.  f below is always the indicator of {X_T^m(target) = 1}.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels, mc
from .graphical import BoxState, Forcing, Timeline, evolve, sample_csr
from .lattice import Box
from .rates import RateSpec, branching_bound, constants
from .stats import Accumulator, Estimate, bernoulli


@dataclass(frozen=True)
class PivotalQuery:
    x: tuple[int, ...]
    t: float
    u: float
    T: float
    m: int
    h: float

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(int(c) for c in np.atleast_1d(self.x)))


class TieError(ValueError):
    """The candidate time coincides with an existing atom at the same site."""


def _check_query(tl: Timeline, q: PivotalQuery, x: int) -> None:
    if not 0 < q.t <= q.T:
        raise ValueError(f"need 0 < t <= T, got t={q.t}, T={q.T}")
    if not 0 <= q.u <= tl.M:
        raise ValueError(f"selector u={q.u} outside [0, {tl.M}]")
    times, _, _ = tl.site_atoms(x)
    if np.any(times == q.t):
        raise TieError(f"an atom already sits at ({q.x}, {q.t})")


def is_pivotal_reference(tl: Timeline, q: PivotalQuery, spec: RateSpec) -> bool:
    """Literal evaluation with three evolutions of the augmented timeline."""
    box = tl.box
    x = box.index(q.x)
    _check_query(tl, q, x)
    aug = tl.with_atoms([x], [q.t], [q.u], [1.0])  # v = 1 is an A-mark for every h
    ones = BoxState.ones(box)
    a = evolve(ones, aug, spec, q.h, T=q.T).value_at(x, q.t) == 1
    lo = evolve(ones, aug, spec, q.h, [Forcing(x, q.t, 0)], T=q.T).final[box.origin]
    hi = evolve(ones, aug, spec, q.h, [Forcing(x, q.t, 1)], T=q.T).final[box.origin]
    return bool(a and lo == 0 and hi == 1)


def probe(tl: Timeline, q: PivotalQuery, spec: RateSpec, w_b: bool = False) -> np.ndarray:
    """Kernel outputs [a, f(x:=0), f(x:=1), X_{t-}(x), value after adding (x,t,u,w)]."""
    box = tl.box
    x = box.index(q.x)
    _check_query(tl, q, x)
    out = np.zeros(5, dtype=np.int64)
    kernels.pivot_probe(np.ones(box.n, dtype=np.uint8), tl.offsets, tl.times, tl.u, tl.v,
                        box.neighbor_table(spec.R), spec.c0, spec.c1, constants(spec).M, float(q.h),
                        x, float(q.t), float(q.u), bool(w_b), float(q.T), box.origin, out)
    return out


def is_pivotal(tl: Timeline, q: PivotalQuery, spec: RateSpec) -> bool:
    a, f0, f1, _, _ = probe(tl, q, spec)
    return bool(a == 1 and f0 == 0 and f1 == 1)


def _batch(spec: RateSpec, box: Box, T: float, h: float, gen: np.random.Generator, count: int,
           qx=None, qt=None, qu=None, qb=None) -> dict[str, np.ndarray]:
    """Fresh timelines plus (optionally fresh) query points; returns per-sample flags."""
    M = constants(spec).M
    if qx is None:
        qx = gen.integers(0, box.n, size=count)
    if qt is None:
        qt = T * (1.0 - gen.random(count))  # (0, T]
    if qu is None:
        qu = gen.random(count) * M
    if qb is None:
        qb = np.zeros(count, dtype=np.bool_)
    offsets, times, us, vs = sample_csr(gen, count * box.n, M, T)
    out = np.zeros((count, 5), dtype=np.int64)
    kernels.batch_pivot(np.ones(box.n, dtype=np.uint8), offsets, times, us, vs, box.n,
                        box.neighbor_table(spec.R), spec.c0, spec.c1, M, float(h),
                        np.asarray(qx, dtype=np.int64), np.asarray(qt, dtype=np.float64),
                        np.asarray(qu, dtype=np.float64), np.asarray(qb, dtype=np.bool_),
                        float(T), box.origin, out)
    a, f0, f1, old, added = out.T
    pivot = (a == 1) & (f0 == 0) & (f1 == 1)
    f_old = np.where(old == 1, f1, f0)
    f_new = np.where(added == 1, f1, f0)
    return {"pivot": pivot, "influence": f_old != f_new, "old": old, "x": qx, "t": qt, "u": qu, "w_b": qb}


def pivotal_probability(q: PivotalQuery, spec: RateSpec, reps: int, seed: int = 0, threads: int = 1) -> Estimate:
    """P_h((x,t,u) is T-pivotal) over fresh timelines, with a Wilson interval."""
    box = Box(q.m, spec.d)
    if not 0 < q.t <= q.T:
        msg = f"precondition violated: need 0 < t <= T, got t={q.t}, T={q.T}; reporting 0"
        warnings.warn(msg, stacklevel=2)
        return Estimate(0.0, 0.0, 0, "precondition-violated", seed, 0.0, 0.0, {"violation": msg})
    if not box.contains(q.x):
        return Estimate(0.0, 0.0, reps, "outside-box", seed, 0.0, 0.0)
    x = box.index(q.x)
    M = constants(spec).M

    def worker(gen, count, shard):
        r = _batch(spec, box, q.T, q.h, gen, count, qx=np.full(count, x), qt=np.full(count, q.t),
                   qu=np.full(count, q.u))
        return int(r["pivot"].sum())

    size = mc.shard_size(box.n, M, q.T)
    hits = sum(mc.run_sharded(worker, reps, seed, size, threads))
    return bernoulli(hits, reps, seed)


def _ring_allocation(box: Box, samples: int) -> list[tuple[np.ndarray, int]]:
    rings = box.sup_norm()
    out = []
    for k in range(box.m + 1):
        members = np.nonzero(rings == k)[0]
        out.append((members, max(1, int(round(samples * members.size / box.n)))))
    return out


def russo_derivative_mc(spec: RateSpec, m: int, T: float, h: float, samples: int, reps_per_sample: int = 1,
                        seed: int = 0, threads: int = 1, stratify: bool = False) -> Estimate:
    """Monte Carlo of -(mass) * E[pivotal] with (x, t, u) uniform on Lambda_m x (0,T] x [0,M)."""
    box = Box(m, spec.d)
    M = constants(spec).M
    mass = M * box.n * T
    r = int(reps_per_sample)

    def run(members: np.ndarray, n_samples: int, stream_base: int) -> Accumulator:
        def worker(gen, count, shard):
            qx = members[gen.integers(0, members.size, size=count)]
            qt = T * (1.0 - gen.random(count))
            qu = gen.random(count) * M
            res = _batch(spec, box, T, h, gen, count * r, qx=np.repeat(qx, r), qt=np.repeat(qt, r),
                         qu=np.repeat(qu, r))
            per_sample = res["pivot"].reshape(count, r).mean(axis=1)
            return Accumulator().add(per_sample)

        size = max(1, mc.shard_size(box.n, M, T, r))
        acc = Accumulator()
        for part in mc.run_sharded(worker, n_samples, seed, size, threads, stream_base):
            acc = acc.merge(part)
        return acc

    if not stratify:
        est = run(np.arange(box.n), samples, 0).estimate(-mass, seed, "russo")
        return est
    mean = 0.0
    var = 0.0
    n_tot = 0
    for k, (members, n_k) in enumerate(_ring_allocation(box, samples)):
        acc = run(members, n_k, 1_000_000 * (k + 1))
        w = M * members.size * T
        mean += w * acc.mean
        var += w * w * acc.var / acc.n
        n_tot += acc.n
    se = math.sqrt(var)
    return Estimate(-mean, se, n_tot, "russo-stratified", seed, -mean - 1.96 * se, -mean + 1.96 * se)


def integrals_I_and_J(spec: RateSpec, m: int, T: float, h: float, samples: int, seed: int = 0,
                      threads: int = 1) -> tuple[Estimate, Estimate]:
    """Influence integral I and pivotal integral J on shared samples.

    I integrates E|f(P + z) - f(P)| against lambda_{h,m}^T (w = B with
    probability h); J integrates P(pivotal) against the markless measure.
    Both have total mass M |Lambda_m| T.  The paired statistic
    I - (M / c1(1)) J is attached to ``I.extra``.
    """
    box = Box(m, spec.d)
    M = constants(spec).M
    mass = M * box.n * T
    K = branching_bound(spec)

    def worker(gen, count, shard):
        qb = gen.random(count) < h
        res = _batch(spec, box, T, h, gen, count, qb=qb)
        infl = res["influence"].astype(np.float64)
        piv = res["pivot"].astype(np.float64)
        return Accumulator().add(infl), Accumulator().add(piv), Accumulator().add(infl - K * piv)

    size = mc.shard_size(box.n, M, T)
    accs = [Accumulator(), Accumulator(), Accumulator()]
    for parts in mc.run_sharded(worker, samples, seed, size, threads):
        accs = [a.merge(p) for a, p in zip(accs, parts)]
    I = accs[0].estimate(mass, seed, "influence")
    J = accs[1].estimate(mass, seed, "pivotal")
    gap = accs[2].estimate(mass, seed, "I-KJ")
    I.extra.update({"K": K, "gap_mean": gap.mean, "gap_stderr": gap.stderr})
    return I, J
