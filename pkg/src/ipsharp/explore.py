"""Two-phase randomized exploration of the truncated dynamics.

Phase 1 starts an auxiliary copy of the dynamics from all ones at a uniform
time S and runs it to T, looking only at atoms of sites that have a 1
somewhere in their R-neighbourhood (an atom anywhere else cannot change
anything because c1(0) = 0).  The auxiliary copy dominates the true one, so
a 0 at the target ends the exploration with f = 0.  Otherwise phase 2
explores the true dynamics from time 0.  The revealed region is a union of
strips {x} x (lo, hi].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels, mc
from .graphical import BoxState, Timeline, evolve, sample_csr
from .lattice import Box
from .pivotal import _batch as _pivot_batch
from .rates import RateSpec, constants
from .stats import Accumulator, Estimate, bernoulli, wilson


class DominationError(AssertionError):
    """The auxiliary dynamics fell below the true dynamics."""


@dataclass(frozen=True, eq=False)
class ExplorationRecord:
    S: float
    T: float
    box: Box
    strip_site: np.ndarray
    strip_lo: np.ndarray
    strip_hi: np.ndarray
    strip_phase: np.ndarray
    phase1_outcome: int
    f: int
    revealed_atoms: int
    revealed_length: float   # Lebesgue length of the union of strips (site-time)

    @property
    def phase2(self) -> bool:
        return bool(np.any(self.strip_phase == 2))

    def strips(self, phase: int | None = None) -> list[tuple[int, float, float]]:
        sel = np.ones(self.strip_site.size, bool) if phase is None else self.strip_phase == phase
        return [(int(s), float(a), float(b)) for s, a, b in zip(self.strip_site[sel], self.strip_lo[sel], self.strip_hi[sel])]

    def contains(self, x: int, t: float) -> bool:
        """Is (x, t) revealed?  Depends on (site, time) only."""
        return bool(np.any((self.strip_site == x) & (self.strip_lo < t) & (t <= self.strip_hi)))


def _explore_arrays(tl: Timeline, spec: RateSpec, h: float, S: float, T: float):
    box = tl.box
    nbr = box.neighbor_table(spec.R)
    size = 2 * (box.n + nbr.shape[1] * tl.n_atoms) + 8
    st_site = np.empty(size, dtype=np.int64)
    st_lo = np.empty(size)
    st_hi = np.empty(size)
    st_phase = np.empty(size, dtype=np.int64)
    v1, f, ns, rev, length = kernels.explore_full(tl.offsets, tl.times, tl.u, tl.v, nbr, spec.c0, spec.c1,
                                                  constants(spec).M, float(h), float(S), float(T), box.origin,
                                                  st_site, st_lo, st_hi, st_phase)
    return (int(v1), int(f), st_site[:ns].copy(), st_lo[:ns].copy(), st_hi[:ns].copy(), st_phase[:ns].copy(),
            int(rev), float(length))


def explore_once(tl: Timeline, S: float, spec: RateSpec, h: float, T: float | None = None,
                 verify: bool = True) -> tuple[ExplorationRecord, int]:
    """Run the exploration on ``tl`` (whose box is Lambda_m) from start time S."""
    T = tl.T if T is None else float(T)
    if not 0.0 <= S <= T:
        raise ValueError(f"start time S={S} outside [0, {T}]")
    v1, f, site, lo, hi, phase, rev, length = _explore_arrays(tl, spec, h, S, T)
    rec = ExplorationRecord(float(S), T, tl.box, site, lo, hi, phase, v1, f, rev, length)
    if verify and v1 == 0:
        true = evolve(BoxState.ones(tl.box), tl, spec, h, T=T).final[tl.box.origin]
        if true > v1:
            raise DominationError("phase 1 reported 0 while the true dynamics has a 1 at the target")
    return rec, f


def check_determinism(tl: Timeline, S: float, spec: RateSpec, h: float, T: float | None = None) -> bool:
    """Does the revealed information give the same f as the full evolution?"""
    T = tl.T if T is None else float(T)
    _, f = explore_once(tl, S, spec, h, T, verify=False)
    return f == int(evolve(BoxState.ones(tl.box), tl, spec, h, T=T).final[tl.box.origin])


def phase1_domination(tl: Timeline, S: float, spec: RateSpec, h: float, T: float | None = None) -> bool:
    """Pathwise check X_t <= auxiliary X_t for every t in [S, T] on shared atoms."""
    T = tl.T if T is None else float(T)
    ones = BoxState.ones(tl.box)
    true = evolve(ones, tl, spec, h, T=T)
    late = tl.times > S
    aux_tl = Timeline(tl.box, tl.T, tl.M, np.concatenate([[0], np.cumsum(np.bincount(tl.sites[late], minlength=tl.box.n))]),
                      tl.times[late], tl.u[late], tl.v[late])
    aux = evolve(ones, aux_tl, spec, h, T=T)
    ts = np.unique(np.concatenate([[S], true.ev_time[true.ev_time >= S], aux.ev_time]))
    return bool(np.all(true.states_at(ts) <= aux.states_at(ts)))


def revelation_bound(spec: RateSpec, T: float, sigma_2m: float) -> float:
    """(|Lambda_R| + 1) * Sigma_T^{2m} / T."""
    return (spec.n_local + 1) * sigma_2m / T


def z_measure_bound(spec: RateSpec, m: int, sigma_2m: float) -> float:
    """Integrated form: (|Lambda_R| + 1) * M * |Lambda_m| * Sigma_T^{2m}."""
    return (spec.n_local + 1) * constants(spec).M * Box(m, spec.d).n * sigma_2m


@dataclass
class ExploreBatch:
    f: np.ndarray
    phase1: np.ndarray
    full: np.ndarray
    member: np.ndarray   # (runs, cells)
    zlen: np.ndarray     # union strip length per run


def _explore_batch(spec: RateSpec, box: Box, T: float, h: float, gen: np.random.Generator, count: int,
                   cell_site: np.ndarray, cell_time: np.ndarray) -> ExploreBatch:
    M = constants(spec).M
    S = gen.random(count) * T
    offsets, times, us, vs = sample_csr(gen, count * box.n, M, T)
    f = np.zeros(count, dtype=np.int64)
    p1 = np.zeros(count, dtype=np.int64)
    full = np.zeros(count, dtype=np.int64)
    member = np.zeros((count, cell_site.size), dtype=np.uint8)
    zlen = np.zeros(count)
    kernels.batch_explore(offsets, times, us, vs, box.n, box.neighbor_table(spec.R), spec.c0, spec.c1, M, float(h),
                          S, float(T), box.origin, cell_site.astype(np.int64), cell_time.astype(np.float64),
                          f, p1, full, member, zlen)
    return ExploreBatch(f, p1, full, member, zlen)


def run_explorations(spec: RateSpec, m: int, T: float, h: float, reps: int, seed: int = 0, threads: int = 1,
                     cell_site=(), cell_time=(), stream_base: int = 0) -> ExploreBatch:
    box = Box(m, spec.d)
    cs = np.asarray(cell_site, dtype=np.int64)
    ct = np.asarray(cell_time, dtype=np.float64)
    M = constants(spec).M

    def worker(gen, count, shard):
        return _explore_batch(spec, box, T, h, gen, count, cs, ct)

    parts = mc.run_sharded(worker, reps, seed, mc.shard_size(box.n, M, T), threads, stream_base)
    return ExploreBatch(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("f", "phase1", "full", "member", "zlen")))


def determinism_trials(spec: RateSpec, m: int, T: float, h: float, reps: int, seed: int = 0, threads: int = 1) -> dict:
    """Mismatches between explored f and full evolution over fresh (timeline, S)."""
    b = run_explorations(spec, m, T, h, reps, seed, threads)
    dom = int(np.count_nonzero((b.phase1 == 0) & (b.full == 1)))
    return {"trials": reps, "mismatches": int(np.count_nonzero(b.f != b.full)), "domination_violations": dom}


def revelation_probability(x, t: float, spec: RateSpec, h: float, T: float, m: int, reps: int, seed: int = 0,
                           threads: int = 1) -> Estimate:
    box = Box(m, spec.d)
    if not 0 < t <= T:
        raise ValueError(f"need 0 < t <= T, got t={t}")
    b = run_explorations(spec, m, T, h, reps, seed, threads, [box.index(x)], [t])
    return bernoulli(int(b.member[:, 0].sum()), reps, seed)


def revelation_grid(spec: RateSpec, h: float, T: float, m: int, xs, ts, reps: int, seed: int = 0,
                    threads: int = 1) -> list[dict]:
    """Revelation probability on the product grid xs x ts (shared runs)."""
    box = Box(m, spec.d)
    cells = [(box.index(x), float(t)) for x in xs for t in ts]
    b = run_explorations(spec, m, T, h, reps, seed, threads, [c[0] for c in cells], [c[1] for c in cells])
    rows = []
    for j, (i, t) in enumerate(cells):
        hits = int(b.member[:, j].sum())
        lo, hi = wilson(hits, reps)
        p = hits / reps
        rows.append({"x": box.coord(i)[0] if box.d == 1 else "|".join(map(str, box.coord(i))), "t": t, "hits": hits,
                     "reps": reps, "p_hat": p, "stderr": math.sqrt(p * (1 - p) / reps), "ci_lo": lo, "ci_hi": hi})
    return rows


REVELATION_COLUMNS = ("x", "t", "hits", "reps", "p_hat", "stderr", "ci_lo", "ci_hi")


@dataclass
class OsssResult:
    rhs: Estimate
    variance: Estimate        # theta_hat (1 - theta_hat) from the same exploration runs
    theta: Estimate
    n_time_nodes: int
    explore_reps: int
    influence_reps: int
    z_measure: Estimate       # E[lambda(Z_infinity)]

    def holds(self, k: float = 3.0) -> bool:
        return self.variance.mean <= self.rhs.mean + k * math.hypot(self.rhs.stderr, self.variance.stderr)

    def to_dict(self) -> dict:
        return {"rhs": self.rhs.as_row(), "variance": self.variance.as_row(), "theta": self.theta.as_row(),
                "z_measure": self.z_measure.as_row(), "n_time_nodes": self.n_time_nodes,
                "explore_reps": self.explore_reps, "influence_reps": self.influence_reps, "holds_3sigma": self.holds()}


def time_nodes(T: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoid nodes on [0, T] (first node taken as a right limit) and weights."""
    t = np.linspace(0.0, T, n + 1)
    w = np.full(n + 1, T / n)
    w[0] = w[-1] = T / (2 * n)
    t[0] = T * 1e-9
    return t, w


def osss_rhs(spec: RateSpec, h: float, T: float, m: int, n_t: int = 16, reps: int = 4000,
             influence_reps: int | None = None, seed: int = 0, threads: int = 1) -> OsssResult:
    """2 * int P(z revealed) E|D_z f| d lambda_{h,m}^T on a (site, time) grid.

    Revelation probabilities come from ``reps`` explorations (all grid cells
    share each run); influences from ``influence_reps`` independent
    timelines per cell, each with a fresh (u, w).  The error is propagated
    to first order through both factors.
    """
    box = Box(m, spec.d)
    M = constants(spec).M
    ts, wt = time_nodes(T, n_t)
    cell_site = np.repeat(np.arange(box.n), ts.size)
    cell_time = np.tile(ts, box.n)
    cell_w = 2.0 * M * np.tile(wt, box.n)
    nb = influence_reps or reps
    b = run_explorations(spec, m, T, h, reps, seed, threads, cell_site, cell_time)
    p_hat = b.member.mean(axis=0)

    def worker(gen, count, shard):
        qx = np.repeat(cell_site, count)
        qt = np.repeat(cell_time, count)
        qb = gen.random(qx.size) < h
        res = _pivot_batch(spec, box, T, h, gen, qx.size, qx=qx, qt=qt, qb=qb)
        return res["influence"].reshape(cell_site.size, count).sum(axis=1)

    size = max(1, mc.shard_size(box.n, M, T) // max(1, cell_site.size))
    hits = sum(mc.run_sharded(worker, nb, seed, size, threads, stream_base=1 << 20))
    d_hat = hits / nb
    rhs = float(np.sum(cell_w * p_hat * d_hat))
    lin_a = b.member.astype(np.float64) @ (cell_w * d_hat)
    var = lin_a.var(ddof=1) / reps if reps > 1 else 0.0
    var += float(np.sum((cell_w * p_hat) ** 2 * d_hat * (1 - d_hat) / nb))
    rhs_est = Estimate(rhs, math.sqrt(var), reps, "osss-product", seed, rhs - 1.96 * math.sqrt(var), rhs + 1.96 * math.sqrt(var))
    theta = bernoulli(int(b.full.sum()), reps, seed)
    th = theta.mean
    corr = reps / (reps - 1) if reps > 1 else 1.0
    v = corr * th * (1 - th)
    v_se = corr * abs(1 - 2 * th) * theta.stderr
    variance = Estimate(v, v_se, reps, "plug-in", seed, v - 1.96 * v_se, v + 1.96 * v_se)
    z = Accumulator().add(M * b.zlen).estimate(1.0, seed, "z-measure")
    return OsssResult(rhs_est, variance, theta, ts.size, reps, nb, z)
