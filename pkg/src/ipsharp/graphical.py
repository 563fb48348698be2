"""Marked Poisson timelines and the forward graphical construction on boxes.

Each atom carries a site, a time in (0, T], an update selector u in [0, M)
and a mark v in [0, 1).  The mark is resolved against h only when the atom
is applied (B iff v < h), so a single timeline serves a whole h-sweep and
the constructions for different h are coupled monotonically.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .lattice import Box
from .rates import RateSpec, constants

MARK_A = "A"
MARK_B = "B"


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def _as_rng(rng) -> tuple[np.random.Generator, int | None, int | None]:
    if isinstance(rng, np.random.Generator):
        return rng, None, None
    if isinstance(rng, tuple):
        seed, stream = rng
        return make_rng(seed, stream), int(seed), int(stream)
    return make_rng(int(rng), 0), int(rng), 0


def poisson_times(rng: np.random.Generator, rows: int, M: float, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row rate-M Poisson points on (0, T] from cumulative Exp(M) gaps.

    Returns ``(counts, times)`` with each row's times ascending and rows
    concatenated in order.
    """
    if rows == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    mean = M * T
    K = int(mean + 6.0 * np.sqrt(mean) + 8)
    cs = np.cumsum(rng.exponential(1.0 / M, size=(rows, K)), axis=1)
    while True:
        need = cs[:, -1] <= T
        if not need.any():
            break
        ext = np.full((rows, K), np.inf)
        ext[need] = cs[need, -1:] + np.cumsum(rng.exponential(1.0 / M, size=(int(need.sum()), K)), axis=1)
        cs = np.hstack([cs, ext])
    mask = cs <= T
    return mask.sum(axis=1).astype(np.int64), cs[mask]


def sample_csr(rng: np.random.Generator, rows: int, M: float, T: float):
    """CSR atoms for ``rows`` independent site clocks: (offsets, times, u, v)."""
    counts, times = poisson_times(rng, rows, M, T)
    offsets = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    us = rng.random(times.size) * M
    vs = rng.random(times.size)
    return offsets, times, us, vs


@dataclass(frozen=True, eq=False)
class Timeline:
    box: Box
    T: float
    M: float
    offsets: np.ndarray
    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    seed: int | None = None
    stream: int | None = None

    def __post_init__(self):
        for name in ("offsets", "times", "u", "v"):
            getattr(self, name).setflags(write=False)

    @property
    def n_atoms(self) -> int:
        return int(self.times.size)

    @property
    def sites(self) -> np.ndarray:
        """Site index of every atom (CSR order)."""
        return np.repeat(np.arange(self.box.n), np.diff(self.offsets))

    def site_atoms(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return self.times[sl], self.u[sl], self.v[sl]

    def merged_order(self) -> np.ndarray:
        """Atom indices in global order: time, then site, then per-site index."""
        k = np.arange(self.n_atoms)
        return np.lexsort((k, self.sites, self.times))

    def records(self) -> np.ndarray:
        """Structured array (site, time, u, v) in global order."""
        order = self.merged_order()
        rec = np.empty(self.n_atoms, dtype=[("site", np.int64), ("time", np.float64), ("u", np.float64), ("v", np.float64)])
        rec["site"] = self.sites[order]
        rec["time"] = self.times[order]
        rec["u"] = self.u[order]
        rec["v"] = self.v[order]
        return rec

    def with_atoms(self, sites: Sequence[int], times: Sequence[float], us: Sequence[float], vs: Sequence[float]) -> "Timeline":
        """Timeline with extra atoms inserted."""
        all_s = np.concatenate([self.sites, np.asarray(sites, dtype=np.int64)])
        all_t = np.concatenate([self.times, np.asarray(times, dtype=np.float64)])
        all_u = np.concatenate([self.u, np.asarray(us, dtype=np.float64)])
        all_v = np.concatenate([self.v, np.asarray(vs, dtype=np.float64)])
        return from_records(self.box, self.T, self.M, all_s, all_t, all_u, all_v)

    def restrict(self, sub: Box) -> "Timeline":
        """Atoms of the sites of a smaller centred box."""
        idx = sub.embed_in(self.box)
        parts = [slice(self.offsets[i], self.offsets[i + 1]) for i in idx]
        counts = np.array([p.stop - p.start for p in parts], dtype=np.int64)
        offsets = np.zeros(sub.n + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        take = np.concatenate([np.arange(p.start, p.stop) for p in parts]) if parts else np.zeros(0, np.int64)
        take = take.astype(np.int64)
        return Timeline(sub, self.T, self.M, offsets, self.times[take], self.u[take], self.v[take], self.seed, self.stream)

    def truncate(self, T: float) -> "Timeline":
        keep = self.times <= T
        return from_records(self.box, T, self.M, self.sites[keep], self.times[keep], self.u[keep], self.v[keep])

    def scramble_marks(self, rng: np.random.Generator) -> "Timeline":
        """Same atom positions with fresh u and v."""
        return Timeline(self.box, self.T, self.M, self.offsets.copy(), self.times.copy(),
                        rng.random(self.n_atoms) * self.M, rng.random(self.n_atoms))


def from_records(box: Box, T: float, M: float, sites, times, us, vs, seed=None, stream=None) -> Timeline:
    sites = np.asarray(sites, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    if sites.size and (sites.min() < 0 or sites.max() >= box.n):
        raise ValueError("atom site outside the box")
    if times.size and (times.min() <= 0 or times.max() > T):
        raise ValueError("atom time outside (0, T]")
    if us.size and (us.min() < 0 or us.max() > M or vs.min() < 0 or vs.max() > 1):
        raise ValueError("atom selector or mark out of range")
    order = np.lexsort((np.arange(sites.size), times, sites))
    counts = np.bincount(sites, minlength=box.n)
    offsets = np.zeros(box.n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return Timeline(box, float(T), float(M), offsets, times[order], us[order], vs[order], seed, stream)


def empty_timeline(box: Box, T: float, M: float) -> Timeline:
    z = np.zeros(0)
    return Timeline(box, float(T), float(M), np.zeros(box.n + 1, dtype=np.int64), z, z.copy(), z.copy())


def sample_timeline(box: Box, T: float, M: float, rng) -> Timeline:
    """Independent rate-M Poisson clocks on every site of ``box`` over (0, T].

    ``rng`` is a seed, a ``(seed, stream)`` pair or a Generator; the first
    two make the timeline reproducible and are recorded on it.
    """
    if not T > 0:
        raise ValueError(f"horizon must be positive, got T={T}")
    if not M > 0:
        raise ValueError(f"clock rate must be positive, got M={M}")
    gen, seed, stream = _as_rng(rng)
    offsets, times, us, vs = sample_csr(gen, box.n, M, T)
    return Timeline(box, float(T), float(M), offsets, times, us, vs, seed, stream)


def classify_mark(v: float, h: float) -> str:
    return MARK_B if v < h else MARK_A


@dataclass
class BoxState:
    """Configuration on a box; sites outside read as 0."""

    box: Box
    bits: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bits is None:
            self.bits = np.zeros(self.box.n, dtype=np.uint8)
        self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(self.box.n)

    @classmethod
    def ones(cls, box: Box) -> "BoxState":
        return cls(box, np.ones(box.n, dtype=np.uint8))

    @classmethod
    def zeros(cls, box: Box) -> "BoxState":
        return cls(box, np.zeros(box.n, dtype=np.uint8))

    def read(self, coord) -> int:
        if not self.box.contains(coord):
            return 0
        return int(self.bits[self.box.index(coord)])

    def local(self, i: int, R: int) -> np.ndarray:
        nbr = self.box.neighbor_table(R)[i]
        return np.where(nbr >= 0, self.bits[np.maximum(nbr, 0)], 0).astype(np.uint8)

    def copy(self) -> "BoxState":
        return BoxState(self.box, self.bits.copy())


@dataclass(frozen=True)
class Atom:
    site: int  # box index
    time: float
    u: float
    v: float


@dataclass(frozen=True)
class Forcing:
    site: int  # box index
    time: float
    value: int


def apply_atom(state: BoxState, spec: RateSpec, atom: Atom, h: float) -> BoxState:
    if not 0 <= atom.site < state.box.n:
        raise ValueError(f"atom site {atom.site} outside {state.box}")
    M = constants(spec).M
    out = state.copy()
    nbr = state.box.neighbor_table(spec.R)
    out.bits[atom.site] = kernels.update_value(state.bits, atom.site, float(atom.u), float(atom.v), nbr,
                                               spec.c0, spec.c1, M, float(h))
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Piecewise-constant path stored as change events."""

    box: Box
    T: float
    init: np.ndarray
    final: np.ndarray
    ev_time: np.ndarray
    ev_site: np.ndarray
    ev_value: np.ndarray

    @property
    def n_events(self) -> int:
        return int(self.ev_time.size)

    def state_at(self, t: float) -> np.ndarray:
        """Configuration after every event at times <= t."""
        s = self.init.copy()
        k = int(np.searchsorted(self.ev_time, t, side="right"))
        for j in range(k):
            s[self.ev_site[j]] = self.ev_value[j]
        return s

    def states_at(self, ts: Iterable[float]) -> np.ndarray:
        ts = np.asarray(list(ts), dtype=np.float64)
        order = np.argsort(ts, kind="stable")
        out = np.empty((ts.size, self.box.n), dtype=np.uint8)
        s = self.init.copy()
        j = 0
        for idx in order:
            while j < self.n_events and self.ev_time[j] <= ts[idx]:
                s[self.ev_site[j]] = self.ev_value[j]
                j += 1
            out[idx] = s
        return out

    def value_at(self, site: int, t: float) -> int:
        sel = (self.ev_site == site) & (self.ev_time <= t)
        if not sel.any():
            return int(self.init[site])
        return int(self.ev_value[np.nonzero(sel)[0][-1]])


def evolve(init: BoxState, tl: Timeline, spec: RateSpec, h: float, forcings: Sequence[Forcing] = (),
           T: float | None = None) -> Trajectory:
    """Forward graphical construction on ``tl.box`` from ``init`` up to time T.

    A forcing (x, t, b) sets the value at x to b at time t, after any atom
    at exactly (x, t) has been applied.
    """
    if init.box != tl.box:
        raise ValueError("initial state and timeline live on different boxes")
    T = tl.T if T is None else float(T)
    if T > tl.T:
        raise ValueError(f"horizon {T} exceeds the timeline horizon {tl.T}")
    fs = sorted(forcings, key=lambda f: f.time)
    seen = set()
    for f in fs:
        if not 0 <= f.site < tl.box.n:
            raise ValueError(f"forcing site {f.site} outside {tl.box}")
        if not 0 <= f.time <= T:
            raise ValueError(f"forcing time {f.time} outside [0, {T}]")
        if f.value not in (0, 1):
            raise ValueError("forcing value must be 0 or 1")
        if (f.site, f.time) in seen:
            raise ValueError("forcings must have distinct (site, time) pairs")
        seen.add((f.site, f.time))
    M = constants(spec).M
    if abs(M - tl.M) > 1e-12 * max(1.0, M):
        raise ValueError(f"timeline clock rate {tl.M} does not match M = {M}")
    nbr = tl.box.neighbor_table(spec.R)
    state = init.bits.copy()
    cap = tl.n_atoms + len(fs) + 1
    ev_t = np.empty(cap)
    ev_s = np.empty(cap, dtype=np.int64)
    ev_v = np.empty(cap, dtype=np.uint8)
    n_ev = kernels.evolve_forced(
        state, tl.offsets, tl.times, tl.u, tl.v, nbr, spec.c0, spec.c1, M, float(h),
        np.array([f.site for f in fs], dtype=np.int64),
        np.array([f.time for f in fs], dtype=np.float64),
        np.array([f.value for f in fs], dtype=np.uint8),
        T, ev_t, ev_s, ev_v,
    )
    return Trajectory(tl.box, T, init.bits.copy(), state, ev_t[:n_ev].copy(), ev_s[:n_ev].copy(), ev_v[:n_ev].copy())


def occupation_time(traj: Trajectory, site: int, T: float | None = None) -> float:
    """Lebesgue measure of {s in [0, T] : X_s(site) = 1}."""
    T = traj.T if T is None else float(T)
    sel = np.nonzero((traj.ev_site == site) & (traj.ev_time <= T))[0]
    val = int(traj.init[site])
    last = 0.0
    total = 0.0
    for j in sel:
        if val:
            total += traj.ev_time[j] - last
        last = traj.ev_time[j]
        val = int(traj.ev_value[j])
    if val:
        total += T - last
    return float(total)


def dump_timeline(tl: Timeline) -> str:
    """Flat CSV stream (site, time, u, v) in global order; floats round-trip exactly."""
    buf = io.StringIO()
    buf.write(f"# m={tl.box.m} d={tl.box.d} T={tl.T!r} M={tl.M!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["site", "time", "u", "v"])
    for rec in tl.records():
        w.writerow([int(rec["site"]), repr(float(rec["time"])), repr(float(rec["u"])), repr(float(rec["v"]))])
    return buf.getvalue()


def load_timeline(text: str) -> Timeline:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("timeline dump must start with a '# m=.. d=.. T=.. M=..' header")
    meta = dict(item.split("=", 1) for item in lines[0][1:].split())
    box = Box(int(meta["m"]), int(meta["d"]))
    rows = list(csv.DictReader(lines[1:]))
    sites = [int(r["site"]) for r in rows]
    return from_records(box, float(meta["T"]), float(meta["M"]), sites,
                        [float(r["time"]) for r in rows], [float(r["u"]) for r in rows], [float(r["v"]) for r in rows])


def _zigzag(z: int) -> int:
    return 2 * z if z >= 0 else -2 * z - 1


class SiteField:
    """Lazily sampled clocks on all of Z^d, keyed by (seed, site).

    The atoms of a site do not depend on which other sites were requested or
    in what order, so boxes of any size cut from the same field are nested
    restrictions of one another.
    """

    def __init__(self, seed: int, T: float, M: float, d: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.T = float(T)
        self.M = float(M)
        self.d = int(d)
        self._cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def atoms(self, site) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        key = tuple(int(c) for c in site)
        hit = self._cache.get(key)
        if hit is None:
            words = [self.seed, self.stream, 0x51E] + [_zigzag(c) for c in key]
            gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
            _, times = poisson_times(gen, 1, self.M, self.T)
            hit = (times, gen.random(times.size) * self.M, gen.random(times.size))
            self._cache[key] = hit
        return hit

    def times(self, site) -> np.ndarray:
        return self.atoms(site)[0]

    def box_timeline(self, box: Box) -> Timeline:
        parts = [self.atoms(c) for c in box.coords]
        counts = np.array([p[0].size for p in parts], dtype=np.int64)
        offsets = np.zeros(box.n + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        cat = lambda j: np.concatenate([p[j] for p in parts]) if parts else np.zeros(0)
        return Timeline(box, self.T, self.M, offsets, cat(0), cat(1), cat(2), self.seed, self.stream)
