"""Estimation campaigns, inequality checks, the sharpness sweep and run manifests."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import integrate

from . import __version__, kernels, mc, oracle
from ._jit import backend
from .graphical import BoxState, Forcing, evolve, make_rng, sample_csr, sample_timeline
from .lattice import Box
from .pivotal import russo_derivative_mc
from .output import OutputError, atomic_write_text, csv_text, json_text
from .rates import (RateSpec, RateSpecError, branching_bound, constants, from_config, normalize, tomllib,
                    validate)
from .stats import Accumulator, Estimate, bernoulli, weighted_loglinear_fit


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    spec: RateSpec
    m: int = 1
    T_grid: tuple[float, ...] = (1.0,)
    h_grid: tuple[float, ...] = (0.0,)
    reps: int = 10_000
    seed: int = 0
    threads: int = 1
    out: str | None = None
    knobs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "T_grid", tuple(float(t) for t in np.atleast_1d(self.T_grid)))
        object.__setattr__(self, "h_grid", tuple(float(h) for h in np.atleast_1d(self.h_grid)))
        for name, grid in (("T", self.T_grid), ("h", self.h_grid)):
            if not grid:
                raise ConfigError(f"{name} grid is empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigError(f"{name} grid must be strictly increasing: {grid}")
        if self.T_grid[0] < 0:
            raise ConfigError("T values must be >= 0")
        if self.h_grid[0] < 0 or self.h_grid[-1] > 1:
            raise ConfigError("h values must lie in [0, 1]")
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}")
        if self.m < 0:
            raise ConfigError(f"m must be >= 0, got {self.m}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def T(self) -> float:
        return self.T_grid[-1]

    @property
    def h(self) -> float:
        return self.h_grid[0]

    def knob(self, name: str, default=None):
        return self.knobs.get(name, default)

    def canonical(self) -> dict:
        """Everything that determines the numbers, in a stable form."""
        return {"model": self.spec.to_config(), "m": self.m, "T_grid": list(self.T_grid), "h_grid": list(self.h_grid),
                "reps": self.reps, "seed": self.seed, "knobs": dict(sorted(self.knobs.items()))}

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


def _grid(run: Mapping, single: str, many: str, default):
    if many in run:
        return tuple(run[many])
    if single in run:
        return (run[single],)
    return default


def config_from_mapping(doc: Mapping[str, Any]) -> ExperimentConfig:
    if "model" not in doc:
        raise ConfigError("configuration has no [model] section")
    try:
        spec = normalize(from_config(doc["model"]))
    except RateSpecError as exc:
        raise ConfigError(str(exc)) from exc
    run = dict(doc.get("run", {}))
    known = {"m", "T", "T_grid", "h", "h_grid", "reps", "seed", "threads", "out"}
    unknown = set(run) - known
    if unknown:
        raise ConfigError(f"unknown [run] keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(
            spec=spec, m=int(run.get("m", 1)), T_grid=_grid(run, "T", "T_grid", (1.0,)),
            h_grid=_grid(run, "h", "h_grid", (0.0,)), reps=int(run.get("reps", 10_000)),
            seed=int(run.get("seed", 0)), threads=int(run.get("threads", 1)), out=run.get("out"),
            knobs=dict(doc.get("knobs", {})),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    return config_from_mapping(doc)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# theta and Sigma


@dataclass
class GridResult:
    """Replication sums over an (h, T) grid on shared timelines."""

    spec: RateSpec
    m: int
    hs: np.ndarray
    Ts: np.ndarray
    reps: int
    seed: int
    hits: np.ndarray      # (H, C) number of replications with X_T(0) = 1
    occ: np.ndarray       # (H, C) sum of occupation times of the origin on [0, T]
    occ2: np.ndarray      # (H, C) sum of squares
    h_order_violations: int = 0

    def theta(self, a: int, c: int) -> Estimate:
        if self.Ts[c] == 0:
            return Estimate(1.0, 0.0, self.reps, "exact", self.seed, 1.0, 1.0)
        return bernoulli(int(self.hits[a, c]), self.reps, self.seed)

    def sigma(self, a: int, c: int) -> Estimate:
        return Accumulator(self.reps, float(self.occ[a, c]), float(self.occ2[a, c])).estimate(1.0, self.seed, "occupation")

    def rows(self) -> list[dict]:
        out = []
        for a, h in enumerate(self.hs):
            for c, T in enumerate(self.Ts):
                th, sg = self.theta(a, c), self.sigma(a, c)
                out.append({"h": float(h), "T": float(T), "m": self.m, "theta": th.mean, "theta_stderr": th.stderr,
                            "theta_ci_lo": th.ci_lo, "theta_ci_hi": th.ci_hi, "sigma": sg.mean,
                            "sigma_stderr": sg.stderr, "reps": self.reps, "seed": self.seed})
        return out


GRID_COLUMNS = ("h", "T", "m", "theta", "theta_stderr", "theta_ci_lo", "theta_ci_hi", "sigma", "sigma_stderr", "reps", "seed")


def simulate_grid(spec: RateSpec, m: int, hs: Sequence[float], Ts: Sequence[float], reps: int, seed: int = 0,
                  threads: int = 1, stream_base: int = 0) -> GridResult:
    """One trajectory per replication and h, read at every T; all h share the timeline."""
    box = Box(m, spec.d)
    M = constants(spec).M
    hs = np.asarray(hs, dtype=np.float64)
    Ts = np.asarray(Ts, dtype=np.float64)
    pos = Ts > 0
    t_grid = Ts[pos]
    H, C = hs.size, Ts.size
    nbr = box.neighbor_table(spec.R)
    init = np.ones(box.n, dtype=np.uint8)

    def worker(gen, count, shard):
        hits = np.zeros((H, C), dtype=np.int64)
        occ = np.zeros((H, C))
        occ2 = np.zeros((H, C))
        if t_grid.size == 0:
            hits[:] = count
            return hits, occ, occ2, 0
        offsets, times, us, vs = sample_csr(gen, count * box.n, M, float(t_grid[-1]))
        vals = np.zeros((count, H, t_grid.size), dtype=np.uint8)
        o = np.zeros((count, H, t_grid.size))
        kernels.batch_checkpoints(init, offsets, times, us, vs, box.n, nbr, spec.c0, spec.c1, M, hs, t_grid,
                                  box.origin, vals, o)
        hits[:, pos] = vals.sum(axis=0)
        hits[:, ~pos] = count
        occ[:, pos] = o.sum(axis=0)
        occ2[:, pos] = (o * o).sum(axis=0)
        order = int(np.count_nonzero(np.diff(vals.astype(np.int8), axis=1) > 0)) if H > 1 else 0
        return hits, occ, occ2, order

    size = mc.shard_size(box.n, M, float(Ts.max()) if Ts.size else 1.0, max(1, H // 2))
    parts = mc.run_sharded(worker, reps, seed, size, threads, stream_base)
    hs_sorted = bool(np.all(np.diff(hs) > 0))
    return GridResult(spec, m, hs, Ts, reps, seed,
                      sum(p[0] for p in parts), sum(p[1] for p in parts), sum(p[2] for p in parts),
                      sum(p[3] for p in parts) if hs_sorted else 0)


def estimate_theta(cfg: ExperimentConfig) -> GridResult:
    return simulate_grid(cfg.spec, cfg.m, cfg.h_grid, cfg.T_grid, cfg.reps, cfg.seed, cfg.threads)


def estimate_sigma(cfg: ExperimentConfig) -> GridResult:
    """Sigma_T(h) as the mean occupation time of the origin (same runs as theta)."""
    return simulate_grid(cfg.spec, cfg.m, cfg.h_grid, cfg.T_grid, cfg.reps, cfg.seed, cfg.threads)


# ---------------------------------------------------------------------------
# differential inequality


def h1_closed_form_derivative(spec: RateSpec, m: int, T: float) -> float:
    """d theta_T^m / dh at h = 1 by first-order perturbation of pure death.

    At h = 1 every site dies at rate M independently, so X_s has independent
    Bernoulli(e^{-Ms}) sites.  Perturbing the generator by dQ gives
    -int_0^T e^{-M(T-s)} E[X_s(0)(M - c0) + (1 - X_s(0)) c1] ds, with the
    rates read at the origin's neighbourhood (zero outside the box).
    """
    box = Box(m, spec.d)
    M = constants(spec).M
    nbr = box.neighbor_table(spec.R)[box.origin]
    inside = nbr >= 0
    K = spec.n_local
    idx = np.arange(1 << K)
    bits = (idx[:, None] >> np.arange(K)[None, :]) & 1
    valid = np.all(bits[:, ~inside] == 0, axis=1)
    idx, bits = idx[valid], bits[valid]
    n_on = bits[:, inside].sum(axis=1)
    n_in = int(inside.sum())
    centre = bits[:, spec.center_bit]

    def integrand(s):
        p = math.exp(-M * s)
        w = p ** n_on * (1 - p) ** (n_in - n_on)
        val = np.where(centre == 1, M - spec.c0[idx], spec.c1[idx])
        return math.exp(-M * (T - s)) * float(np.dot(w, val))

    return -integrate.quad(integrand, 0.0, T, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


@dataclass
class DiffIneqRow:
    h: float
    T: float
    m: int
    theta: float
    dtheta: float
    sigma_2m: float
    lhs: float
    rhs: float
    budget: float
    status: str            # pass / fail / inconclusive
    derivative_source: str
    sigma_source: str
    corollary_lhs: float = math.nan    # -theta'
    corollary_rhs: float = math.nan    # c T theta / Sigma
    corollary_status: str = "n/a"

    def as_row(self) -> dict:
        return dict(self.__dict__)


DIFF_COLUMNS = ("h", "T", "m", "theta", "dtheta", "sigma_2m", "lhs", "rhs", "budget", "status", "derivative_source",
                "sigma_source", "corollary_lhs", "corollary_rhs", "corollary_status")


def _classify(lhs: float, rhs: float, budget: float) -> str:
    if rhs - lhs > budget:
        return "pass"
    if lhs - rhs > budget:
        return "fail"
    if lhs <= rhs and budget == 0:
        return "pass"
    return "inconclusive"


ORACLE_BUDGET = 1e-8


def diff_ineq_check(cfg: ExperimentConfig, russo_samples: int | None = None) -> list[DiffIneqRow]:
    """theta(1 - theta) <= 2 (M / c1(1)) (|Lambda_R| + 1) (-theta') Sigma^{2m} / T on the (h, T) grid.

    Exact oracle values are used when the boxes are small enough; otherwise
    theta' comes from the Russo estimator and Sigma^{2m} from occupation
    times, and the error budget is three combined standard errors.
    """
    spec, m = cfg.spec, cfg.m
    K = branching_bound(spec)
    factor = 2.0 * K * (spec.n_local + 1)
    cap = int(cfg.knob("oracle_cap", oracle.DEFAULT_STATE_CAP))
    n_m = Box(m, spec.d).n
    n_2m = Box(2 * m, spec.d).n
    exact_m = (1 << n_m) <= cap
    exact_2m = (1 << n_2m) <= cap
    theta10 = oracle.exact_theta(oracle.build_generator(spec, m, 0.0, cap), 1.0) if exact_m else None
    if theta10 is None:
        g = simulate_grid(spec, m, [0.0], [1.0], cfg.reps, cfg.seed, cfg.threads, stream_base=7 << 24)
        theta10 = g.theta(0, 0).mean
    c_cor = (1.0 - theta10) / factor
    sig_mc = None
    if not exact_2m:
        sig_mc = simulate_grid(spec, 2 * m, cfg.h_grid, cfg.T_grid, cfg.reps, cfg.seed, cfg.threads, stream_base=3 << 24)
    th_mc = None
    if not exact_m:
        th_mc = simulate_grid(spec, m, cfg.h_grid, cfg.T_grid, cfg.reps, cfg.seed, cfg.threads, stream_base=5 << 24)
    rows = []
    for a, h in enumerate(cfg.h_grid):
        G = oracle.build_generator(spec, m, h, cap) if exact_m else None
        G2 = oracle.build_generator(spec, 2 * m, h, cap) if exact_2m else None
        for c, T in enumerate(cfg.T_grid):
            if T == 0:
                rows.append(DiffIneqRow(h, T, m, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, "pass", "exact", "exact"))
                continue
            var_terms = []
            if G is not None:
                th = oracle.exact_theta(G, T)
                dth = float(oracle.derivative_curve(G, [T])[0])
                d_src = "oracle"
                se_th = se_d = 0.0
            else:
                te = th_mc.theta(a, c)
                th, se_th = te.mean, te.stderr
                de = russo_derivative_mc(spec, m, T, h, russo_samples or cfg.reps, seed=cfg.seed + a * 1000 + c,
                                         threads=cfg.threads)
                dth, se_d = de.mean, de.stderr
                d_src = "russo-mc"
            if G2 is not None:
                sig = oracle.sigma_from_generator(G2, T)
                s_src, se_s = "oracle", 0.0
            else:
                se = sig_mc.sigma(a, c)
                sig, se_s = se.mean, se.stderr
                s_src = "occupation-mc"
            lhs = th * (1 - th)
            rhs = factor * (-dth) * sig / T
            var_terms.append((abs(1 - 2 * th) * se_th) ** 2)
            var_terms.append((factor * sig / T * se_d) ** 2)
            var_terms.append((factor * (-dth) / T * se_s) ** 2)
            budget = 3.0 * math.sqrt(sum(var_terms))
            if budget == 0.0:
                budget = ORACLE_BUDGET
            row = DiffIneqRow(h, T, m, th, dth, sig, lhs, rhs, budget, _classify(lhs, rhs, budget), d_src, s_src)
            if T >= 1.0 and sig > 0:
                row.corollary_lhs = -dth
                row.corollary_rhs = c_cor * T * th / sig
                b2 = 3.0 * math.hypot(se_d, c_cor * T / sig * se_th) if se_d or se_th else ORACLE_BUDGET
                row.corollary_status = _classify(row.corollary_rhs, row.corollary_lhs, b2)
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# sharpness


def eps_to_h(epsilon: float, M: float) -> tuple[float, float]:
    """h = eps / (M + eps) and the time rescaling factor 1 / (1 - h)."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if math.isinf(epsilon):
        return 1.0, math.inf
    h = epsilon / (M + epsilon)
    return h, (math.inf if h >= 1.0 else 1.0 / (1.0 - h))


@dataclass
class ExpFit:
    h: float
    rate: float = math.nan
    rate_se: float = math.nan
    intercept: float = math.nan
    r2: float = math.nan
    r2_binomial: float = math.nan
    n_points: int = 0
    T_range: tuple[float, float] = (math.nan, math.nan)
    status: str = "ok"


@dataclass
class SharpnessReport:
    grid: GridResult
    growth_exponent: dict[float, float]
    h1: float
    h1_method: str
    fits: dict[float, ExpFit]
    plateau: dict[float, bool]
    epsilon: float
    noise_floor: float

    def theta_table(self) -> list[dict]:
        return self.grid.rows()

    def fit_rows(self) -> list[dict]:
        out = []
        for h, f in sorted(self.fits.items()):
            out.append({"h": h, "rate": f.rate, "rate_stderr": f.rate_se, "intercept": f.intercept, "r2": f.r2,
                        "r2_binomial": f.r2_binomial,
                        "n_points": f.n_points, "T_lo": f.T_range[0], "T_hi": f.T_range[1], "status": f.status,
                        "growth_exponent": self.growth_exponent.get(h, math.nan), "plateau": self.plateau.get(h, False)})
        return out

    def summary(self) -> dict:
        return {"h1": self.h1, "h1_method": self.h1_method, "epsilon": self.epsilon, "noise_floor": self.noise_floor,
                "reps": self.grid.reps, "m": self.grid.m, "seed": self.grid.seed,
                "h_grid": [float(h) for h in self.grid.hs], "T_grid": [float(t) for t in self.grid.Ts],
                "fits": self.fit_rows()}


FIT_COLUMNS = ("h", "rate", "rate_stderr", "intercept", "r2", "r2_binomial", "n_points", "T_lo", "T_hi", "status", "growth_exponent", "plateau")


def growth_exponent(Ts: np.ndarray, sig: np.ndarray) -> float:
    """Least-squares slope of log Sigma against log T over the top half of the grid."""
    k = Ts.size // 2
    x, y = np.log(Ts[k:]), np.log(np.maximum(sig[k:], 1e-300))
    if x.size < 2:
        return math.nan
    return float(np.polyfit(x, y, 1)[0])


def fit_decay(grid: GridResult, a: int, floor: float, min_points: int = 4) -> ExpFit:
    h = float(grid.hs[a])
    p = grid.hits[a] / grid.reps
    use = (grid.Ts > 0) & (p > floor) & (p < 1.0)
    if int(use.sum()) < min_points:
        return ExpFit(h, n_points=int(use.sum()), status="no usable T-range")
    Ts = grid.Ts[use]
    y = np.log(p[use])
    # count weights: var(log hits) ~ 1 / hits
    a0, b, se, r2 = weighted_loglinear_fit(Ts, y, grid.hits[a][use])
    # binomial weights additionally divide by 1 - p, which favours the early transient
    r2_binom = weighted_loglinear_fit(Ts, y, grid.hits[a][use] / (1.0 - p[use]))[3]
    return ExpFit(h, -b, se, a0, r2, r2_binom, int(use.sum()), (float(Ts[0]), float(Ts[-1])))


def is_plateau(grid: GridResult, a: int, eps: float, floor: float) -> bool:
    """theta loses less than a fraction eps (up to 3 sigma) over the last doubling of T."""
    last = grid.Ts.size - 1
    ref = int(np.searchsorted(grid.Ts, grid.Ts[last] / 2.0, side="right")) - 1
    if ref < 0 or ref == last:
        return False
    hi, lo = grid.theta(a, ref), grid.theta(a, last)
    return bool(lo.mean > floor and lo.mean >= (1.0 - eps) * hi.mean - 3.0 * math.hypot(lo.stderr, hi.stderr))


def sharpness_sweep(cfg: ExperimentConfig, epsilon: float | None = None) -> SharpnessReport:
    eps = float(cfg.knob("epsilon", 0.1) if epsilon is None else epsilon)
    grid = simulate_grid(cfg.spec, cfg.m, cfg.h_grid, cfg.T_grid, cfg.reps, cfg.seed, cfg.threads)
    Ts = grid.Ts
    floor = 10.0 / math.sqrt(cfg.reps)
    growth = {}
    for a, h in enumerate(grid.hs):
        sig = grid.occ[a] / grid.reps
        pos = Ts > 0
        growth[float(h)] = growth_exponent(Ts[pos], sig[pos])
    below = [h for h in grid.hs if growth[float(h)] < 1.0 - eps]
    if below:
        h1, method = float(below[0]), f"sigma-growth-exponent<1-{eps:g} (finite-T estimate)"
    else:
        h1, method = 1.0, "no grid h with sub-linear Sigma growth (finite-T estimate)"
    fits = {float(h): fit_decay(grid, a, floor) for a, h in enumerate(grid.hs) if h >= h1}
    plateau = {float(h): is_plateau(grid, a, eps, floor) for a, h in enumerate(grid.hs)}
    return SharpnessReport(grid, growth, h1, method, fits, plateau, eps, floor)


# ---------------------------------------------------------------------------
# coupling audit


@dataclass
class CouplingAudit:
    trials: int
    initial_state: int = 0
    h_order: int = 0
    forced_sandwich: int = 0
    box_nesting: int = 0

    def total(self) -> int:
        return self.initial_state + self.h_order + self.forced_sandwich + self.box_nesting


def _ordered(lo_traj, hi_traj, ts) -> bool:
    return bool(np.all(lo_traj.states_at(ts) <= hi_traj.states_at(ts)))


def coupling_audit(spec: RateSpec, m: int, T: float, trials: int, seed: int = 0,
                   hs: Sequence[float] = (0.0, 0.1, 0.3, 0.6, 1.0)) -> CouplingAudit:
    """Pathwise monotonicity checks on shared timelines (violations counted)."""
    M = constants(spec).M
    big = Box(2 * m, spec.d)
    small = Box(m, spec.d)
    audit = CouplingAudit(trials)
    for r in range(trials):
        gen = make_rng(seed, r)
        tl2 = sample_timeline(big, T, M, gen)
        tl = tl2.restrict(small)
        h = float(gen.random())
        # (a) initial states xi <= eta
        eta = (gen.random(small.n) < 0.7).astype(np.uint8)
        xi = eta & (gen.random(small.n) < 0.7).astype(np.uint8)
        lo = evolve(BoxState(small, xi), tl, spec, h)
        hi = evolve(BoxState(small, eta), tl, spec, h)
        ts = np.unique(np.concatenate([[0.0, T], lo.ev_time, hi.ev_time]))
        audit.initial_state += not _ordered(lo, hi, ts)
        # (b) h <= h' gives X^{h'} <= X^{h} at T
        finals = [evolve(BoxState.ones(small), tl, spec, hh).final for hh in hs]
        audit.h_order += any(np.any(b > a) for a, b in zip(finals, finals[1:]))
        # (c) forced sandwich
        x = int(gen.integers(small.n))
        t = float(gen.random() * T)
        free = evolve(BoxState.ones(small), tl, spec, h)
        f0 = evolve(BoxState.ones(small), tl, spec, h, [Forcing(x, t, 0)])
        f1 = evolve(BoxState.ones(small), tl, spec, h, [Forcing(x, t, 1)])
        ts = np.unique(np.concatenate([[0.0, t, T], free.ev_time, f0.ev_time, f1.ev_time]))
        audit.forced_sandwich += not (_ordered(f0, free, ts) and _ordered(free, f1, ts))
        # (d) X^m <= X^{2m} on the sites of the small box
        xb = evolve(BoxState.ones(big), tl2, spec, h)
        ts = np.unique(np.concatenate([[0.0, T], free.ev_time, xb.ev_time]))
        inner = small.embed_in(big)
        audit.box_nesting += bool(np.any(free.states_at(ts) > xb.states_at(ts)[:, inner]))
    return audit


# ---------------------------------------------------------------------------
# manifests


def run_manifest(cfg: ExperimentConfig, outputs: Mapping[str, str], out_dir, command: str = "",
                 extra: Mapping[str, Any] | None = None) -> Path:
    """Write ``outputs`` (name -> text) and a manifest with their checksums.

    Nothing is written unless the directory exists; every file goes through
    a temporary file and a rename.
    """
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise OutputError(f"output directory {out_dir} does not exist")
    sums = {}
    for name, text in outputs.items():
        sums[name] = atomic_write_text(out_dir / name, text)
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "config": cfg.canonical(),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "version": __version__,
        "backend": backend(),
        "outputs": sums,
    }
    if extra:
        manifest["extra"] = dict(extra)
    path = out_dir / "manifest.json"
    atomic_write_text(path, json_text(manifest))
    return path
