"""Backward influence cones and the dominating branching random walk.

The cone of (target, T) is built by scanning atoms backward in time: when
an atom (x, s) is met with x already in the cone, every site of x + Lambda_R
joins at time s.  Only atom positions matter, never the marks.  A state at
(y, t) with t > entry(y) cannot affect the target at T, so evolving only
the atoms inside the cone reproduces X_T(target) exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .graphical import BoxState, SiteField, Timeline, evolve, make_rng, sample_csr, sample_timeline
from .lattice import Box, cube_offsets
from .rates import RateSpec, constants
from .stats import Estimate, sample_estimate, weighted_loglinear_fit, wilson

DEFAULT_POPULATION_CAP = 10_000_000


class ConeEscapeError(RuntimeError):
    """The cone reached the boundary of a timeline that cannot be extended."""


class BrwCapError(RuntimeError):
    """Branching population exceeded the configured cap."""


@dataclass(frozen=True, eq=False)
class InfluenceCone:
    T: float
    box: Box
    R: int
    target: tuple[int, ...]
    entry: np.ndarray          # per box index: joining time, -1 if never
    step_times: np.ndarray     # every atom met inside the cone, decreasing
    step_sites: np.ndarray
    clipped: bool = False      # neighbours outside the box were dropped

    @property
    def sites(self) -> list[tuple[int, ...]]:
        """Sites of I_0^T."""
        return [self.box.coord(i) for i in np.nonzero(self.entry >= 0)[0]]

    @property
    def jump_times(self) -> np.ndarray:
        """Times at which the set actually grows, decreasing (T first)."""
        t = np.unique(self.entry[self.entry >= 0])[::-1]
        return t if t.size and t[0] == self.T else np.concatenate([[self.T], t])

    def contains(self, x, t: float) -> bool:
        if not 0 <= t <= self.T:
            raise ValueError(f"time {t} outside [0, {self.T}]")
        if not self.box.contains(x):
            # an unclipped cone never touches the box boundary
            return False
        return bool(t <= self.entry[self.box.index(x)])

    def size_at(self, t: float) -> int:
        return int(np.count_nonzero((self.entry >= 0) & (t <= self.entry)))

    def sets(self) -> list[tuple[float, frozenset]]:
        """[(t_j, I_{t_j})] for the jump times, from T downwards."""
        return [(float(t), frozenset(self.box.coord(i) for i in np.nonzero(self.entry >= t)[0]))
                for t in self.jump_times]

    def max_distance(self) -> int:
        return int(self.box.sup_norm()[self.entry >= 0].max())


def extend_timeline(tl: Timeline, bigger: Box, rng: np.random.Generator) -> Timeline:
    """Same atoms on the old sites plus fresh independent clocks on the new ones."""
    fresh_off, fresh_t, fresh_u, fresh_v = sample_csr(rng, bigger.n, tl.M, tl.T)
    inner = np.full(bigger.n, -1, dtype=np.int64)
    inner[tl.box.embed_in(bigger)] = np.arange(tl.box.n)
    parts_t, parts_u, parts_v, counts = [], [], [], np.zeros(bigger.n, dtype=np.int64)
    for i in range(bigger.n):
        j = inner[i]
        if j >= 0:
            sl = slice(tl.offsets[j], tl.offsets[j + 1])
            src = (tl.times[sl], tl.u[sl], tl.v[sl])
        else:
            sl = slice(fresh_off[i], fresh_off[i + 1])
            src = (fresh_t[sl], fresh_u[sl], fresh_v[sl])
        parts_t.append(src[0])
        parts_u.append(src[1])
        parts_v.append(src[2])
        counts[i] = src[0].size
    offsets = np.zeros(bigger.n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return Timeline(bigger, tl.T, tl.M, offsets, np.concatenate(parts_t), np.concatenate(parts_u),
                    np.concatenate(parts_v), tl.seed, tl.stream)


def _cone_on(tl: Timeline, T: float, R: int, target, clip: bool):
    box = tl.box
    nbr = box.neighbor_table(R)
    entry = np.empty(box.n)
    cap = tl.n_atoms + 1
    step_t = np.empty(cap)
    step_s = np.empty(cap, dtype=np.int64)
    steps, escaped = kernels.backward_cone(tl.offsets, tl.times, nbr, box.index(target), float(T), clip,
                                           entry, step_t, step_s)
    return entry, step_t[:steps].copy(), step_s[:steps].copy(), bool(escaped)


def backward_cone(source, T: float | None = None, R: int = 1, target=None, clip: bool = False,
                  lazy: bool = True, rng=None, max_m: int = 4096) -> tuple[InfluenceCone, Timeline]:
    """Influence cone I_t^T of (target, T) and the timeline it was built on.

    ``source`` is a :class:`Timeline` or a :class:`SiteField`.  With
    ``clip`` the cone lives inside the timeline's box (the truncated
    dynamics, whose outside sites never change).  Otherwise an escaping cone
    is retried on a doubled box: a SiteField supplies the outer clocks
    itself, a Timeline is extended with fresh clocks from ``rng`` (default:
    derived from the timeline's own seed), or :class:`ConeEscapeError` is
    raised when ``lazy`` is off.
    """
    if isinstance(source, SiteField):
        T = source.T if T is None else T
        d = source.d
        m = max(1, 2 * R)
        if target is None:
            target = (0,) * d
        m = max(m, int(np.abs(target).max()) + R)
        while True:
            tl = source.box_timeline(Box(m, d))
            entry, st, ss, escaped = _cone_on(tl, T, R, target, clip=False)
            if not escaped:
                break
            if 2 * m > max_m:
                raise ConeEscapeError(f"cone exceeds the box of half-width {max_m}")
            m *= 2
    else:
        tl = source
        T = tl.T if T is None else T
        if T > tl.T:
            raise ValueError(f"horizon {T} exceeds the timeline horizon {tl.T}")
        if target is None:
            target = (0,) * tl.box.d
        while True:
            entry, st, ss, escaped = _cone_on(tl, T, R, target, clip)
            if not escaped or clip:
                break
            if not lazy:
                raise ConeEscapeError(f"cone of ({target}, {T}) leaves {tl.box}")
            if 2 * tl.box.m > max_m:
                raise ConeEscapeError(f"cone exceeds the box of half-width {max_m}")
            if rng is None:
                rng = make_rng(tl.seed if tl.seed is not None else 0, 0xC0E + (tl.stream or 0))
            tl = extend_timeline(tl, Box(2 * max(tl.box.m, R), tl.box.d), rng)
    target = tuple(int(c) for c in np.atleast_1d(target))
    cone = InfluenceCone(float(T), tl.box, int(R), target, entry, st, ss, clipped=bool(clip and escaped))
    return cone, tl


def cone_contains(cone: InfluenceCone, x, t: float) -> bool:
    return cone.contains(x, t)


def restricted_timeline(tl: Timeline, cone: InfluenceCone) -> Timeline:
    """Keep only atoms (y, s) with y in I_s^T."""
    if tl.box != cone.box:
        raise ValueError("cone and timeline live on different boxes")
    keep = tl.times <= cone.entry[tl.sites]
    counts = np.bincount(tl.sites[keep], minlength=tl.box.n)
    offsets = np.zeros(tl.box.n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return Timeline(tl.box, tl.T, tl.M, offsets, tl.times[keep], tl.u[keep], tl.v[keep], tl.seed, tl.stream)


def evolve_in_cone(tl: Timeline, cone: InfluenceCone, spec: RateSpec, h: float) -> int:
    """X_T(target) from all ones using only the atoms inside the cone."""
    sub = restricted_timeline(tl, cone)
    traj = evolve(BoxState.ones(tl.box), sub, spec, h, T=cone.T)
    return int(traj.final[tl.box.index(cone.target)])


# ---------------------------------------------------------------------------
# branching random walk


@dataclass(frozen=True)
class BrwPopulation:
    positions: np.ndarray  # (n, d)
    T: float

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])


def _brw_run(rng: np.random.Generator, pos: np.ndarray, birth: np.ndarray, run: np.ndarray, M: float,
             offs: np.ndarray, horizon: float, queries: np.ndarray, n_runs: int, cap: int,
             keep_positions: bool = False):
    """Generation-by-generation simulation.

    Each particle lives an Exp(M) time and, if it dies before ``horizon``,
    is replaced by one child per offset.  Returns (alive counts per run and
    query time, final positions or None).
    """
    K = offs.shape[0]
    counts = np.zeros((n_runs, queries.size), dtype=np.int64)
    final = []
    while pos.shape[0]:
        if pos.shape[0] > cap:
            raise BrwCapError(f"population {pos.shape[0]} exceeds the cap {cap}")
        death = birth + rng.exponential(1.0 / M, size=birth.size)
        for q, tq in enumerate(queries):
            alive = (birth <= tq) & (death > tq)
            if alive.any():
                counts[:, q] += np.bincount(run[alive], minlength=n_runs)
        stays = death > horizon
        if keep_positions and stays.any():
            final.append(pos[stays])
        br = ~stays
        nb = int(br.sum())
        if nb == 0:
            break
        pos = (pos[br][:, None, :] + offs[None, :, :]).reshape(nb * K, -1)
        birth = np.repeat(death[br], K)
        run = np.repeat(run[br], K)
    if keep_positions:
        d = offs.shape[1]
        return counts, (np.concatenate(final) if final else np.zeros((0, d), dtype=np.int64))
    return counts, None


def brw_simulate(M: float, R: int, d: int, T: float, rng, cap: int = DEFAULT_POPULATION_CAP) -> BrwPopulation:
    """Continuous-time BRW from one particle at the origin, observed at T."""
    if T < 0:
        raise ValueError(f"T must be >= 0, got {T}")
    gen = rng if isinstance(rng, np.random.Generator) else make_rng(int(rng))
    offs = cube_offsets(R, d)
    _, final = _brw_run(gen, np.zeros((1, d), dtype=np.int64), np.zeros(1), np.zeros(1, dtype=np.int64), M, offs,
                        float(T), np.zeros(0), 1, cap, keep_positions=True)
    return BrwPopulation(final, float(T))


def brw_expected_size(M: float, n_local: int, T: float) -> float:
    return math.exp(M * (n_local - 1) * T)


def brw_population_sizes(M: float, R: int, d: int, T: float, reps: int, seed: int = 0,
                         cap: int = DEFAULT_POPULATION_CAP) -> np.ndarray:
    """Population sizes at T of ``reps`` independent walks (vectorized in chunks)."""
    offs = cube_offsets(R, d)
    mean = brw_expected_size(M, offs.shape[0], T)
    chunk = int(max(1, min(reps, cap // max(1.0, 20.0 * mean * offs.shape[0]))))
    out = np.empty(reps, dtype=np.int64)
    done = 0
    j = 0
    while done < reps:
        c = min(chunk, reps - done)
        gen = make_rng(seed, j)
        counts, _ = _brw_run(gen, np.zeros((c, d), dtype=np.int64), np.zeros(c), np.arange(c), M, offs,
                             float(T), np.array([float(T)]), c, cap)
        out[done:done + c] = counts[:, 0]
        done += c
        j += 1
    return out


def brw_mean_check(M: float, R: int, d: int, T: float, reps: int, seed: int = 0) -> tuple[Estimate, float]:
    sizes = brw_population_sizes(M, R, d, T, reps, seed)
    return sample_estimate(sizes, seed=seed, method="brw-mean"), brw_expected_size(M, cube_offsets(R, d).shape[0], T)


@dataclass(frozen=True)
class CoupledCount:
    times: np.ndarray       # forward times, decreasing from T
    cone_sizes: np.ndarray  # |I_t^T|
    population: np.ndarray  # coupled BRW population at backward time T - t


def coupled_brw(cone: InfluenceCone, M: float, rng: np.random.Generator,
                cap: int = DEFAULT_POPULATION_CAP) -> CoupledCount:
    """Branching random walk run backward in time on the cone's own clocks.

    Each cone site carries one "owner" particle that branches at the site's
    atoms.  Offspring landing on a new site become its owner; offspring on a
    site that already has one are extra particles with fresh Exp(M) clocks.
    All clocks are independent rate-M clocks, so the total is a BRW, and the
    owners alone number |I_t^T|.
    """
    if cone.clipped:
        raise ValueError("the coupling needs an unclipped cone")
    box = cone.box
    nbr = box.neighbor_table(cone.R)
    gpos, gbirth = [], []
    for s, x in zip(cone.step_times, cone.step_sites):
        for y in nbr[x]:
            if y != x and cone.entry[y] > s:
                gpos.append(box.coords[y])
                gbirth.append(cone.T - s)
    times = np.concatenate([cone.jump_times, [0.0]])
    times = np.unique(times)[::-1]
    sizes = np.array([cone.size_at(t) for t in times], dtype=np.int64)
    queries = cone.T - times
    extra = np.zeros(times.size, dtype=np.int64)
    if gpos:
        d = box.d
        pos = np.asarray(gpos, dtype=np.int64).reshape(-1, d)
        counts, _ = _brw_run(rng, pos, np.asarray(gbirth), np.zeros(len(gpos), dtype=np.int64), M,
                             cube_offsets(cone.R, d), cone.T, queries, 1, cap)
        extra = counts[0]
    return CoupledCount(times, sizes, sizes + extra)


# ---------------------------------------------------------------------------
# tail profile


@dataclass
class TailProfile:
    rows: list[dict]
    slope: float
    slope_se: float
    intercept: float
    r2: float
    fit_distances: list[int] = field(default_factory=list)

    COLUMNS = ("distance", "hits", "reps", "p_hat", "ci_lo", "ci_hi")

    def monotone_within_ci(self) -> bool:
        """No distance has a CI lying entirely above the CI of a nearer distance."""
        for a, b in zip(self.rows, self.rows[1:]):
            if b["ci_lo"] > a["ci_hi"]:
                return False
        return True


def cone_tail_profile(spec: RateSpec, T: float, h: float, reps: int, seed: int = 0,
                      min_hits: int = 30) -> TailProfile:
    """Empirical P(the cone I_0^T meets the sup-norm sphere of radius k).

    The cone only depends on atom positions, so ``h`` does not enter; it is
    accepted so that tables are labelled consistently with other runs.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    M = constants(spec).M
    d, R = spec.d, spec.R
    m0 = max(1, 4 * R)
    hits: dict[int, int] = {}
    for r in range(reps):
        gen = make_rng(seed, r)
        tl = sample_timeline(Box(m0, d), T, M, gen)
        cone, tl = backward_cone(tl, T, R, clip=False, lazy=True, rng=gen)
        rings = np.unique(cone.box.sup_norm()[cone.entry >= 0])
        for k in rings:
            hits[int(k)] = hits.get(int(k), 0) + 1
    kmax = max(hits)
    rows = []
    for k in range(kmax + 2):
        n_hit = hits.get(k, 0)
        lo, hi = wilson(n_hit, reps)
        rows.append({"distance": k, "hits": n_hit, "reps": reps, "p_hat": n_hit / reps, "ci_lo": lo, "ci_hi": hi})
    use = [r for r in rows if r["hits"] >= min_hits and r["p_hat"] < 1.0]
    if len(use) >= 2:
        x = np.array([r["distance"] for r in use], dtype=np.float64)
        p = np.array([r["p_hat"] for r in use])
        w = np.array([r["hits"] for r in use]) / (1.0 - p)
        a, b, se, r2 = weighted_loglinear_fit(x, np.log(p), w)
    else:
        a = b = se = r2 = math.nan
    return TailProfile(rows, b, se, a, r2, [r["distance"] for r in use])
