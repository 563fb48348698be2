"""Finite-range rate specifications.

A local configuration is a 0/1 vector over Lambda_R = {-R..R}^d listed in
lexicographic coordinate order (see :func:`ipsharp.lattice.cube_offsets`).
Tables are indexed by the bitmask ``sum(xi[k] << k)``, so bit k is the k-th
site of Lambda_R.  Bit-strings used in reports are written site 0 first,
e.g. for d=1, R=1 the string ``"100"`` means xi(-1)=1, xi(0)=0, xi(1)=0.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .lattice import cube_offsets

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

BUILTIN_KINDS = ("table", "contact", "threshold", "pure_death")
MAX_LOCAL_SITES = 20


class RateSpecError(ValueError):
    """Malformed or inconsistent rate specification."""


@dataclass(frozen=True, eq=False)
class RateSpec:
    d: int
    R: int
    c0: np.ndarray
    c1: np.ndarray
    kind: str = "table"
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.R < 0:
            raise RateSpecError(f"need d >= 1 and R >= 0, got d={self.d}, R={self.R}")
        n_local = (2 * self.R + 1) ** self.d
        if n_local > MAX_LOCAL_SITES:
            raise RateSpecError(f"|Lambda_R| = {n_local} too large for tabulated rates")
        for name in ("c0", "c1"):
            tab = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if tab.size != 1 << n_local:
                raise RateSpecError(
                    f"table length mismatch: {name} has {tab.size} entries, expected 2^{n_local} = {1 << n_local}"
                )
            if not np.all(np.isfinite(tab)):
                raise RateSpecError(f"{name} contains non-finite rates")
            if np.any(tab < 0):
                raise RateSpecError(f"negative rate in {name} at index {int(np.argmax(tab < 0))}")
            tab.setflags(write=False)
            object.__setattr__(self, name, tab)
        object.__setattr__(self, "params", dict(self.params))

    @property
    def n_local(self) -> int:
        """|Lambda_R|."""
        return (2 * self.R + 1) ** self.d

    @property
    def center_bit(self) -> int:
        return (self.n_local - 1) // 2

    @property
    def offsets(self) -> np.ndarray:
        return cube_offsets(self.R, self.d)

    @property
    def all_ones(self) -> int:
        return (1 << self.n_local) - 1

    def with_tables(self, c0, c1) -> "RateSpec":
        return RateSpec(self.d, self.R, c0, c1, kind=self.kind, params=self.params)

    def describe(self) -> str:
        if self.kind == "table":
            return f"table(d={self.d}, R={self.R})"
        inner = ", ".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"{self.kind}({inner}; d={self.d}, R={self.R})"

    def to_config(self) -> dict[str, Any]:
        out: dict[str, Any] = {"d": self.d, "R": self.R, "kind": self.kind}
        if self.kind == "table":
            out["c0_table"] = [float(v) for v in self.c0]
            out["c1_table"] = [float(v) for v in self.c1]
        else:
            out.update(self.params)
        return out


@dataclass(frozen=True)
class RateConstants:
    C0: float
    C1: float

    @property
    def M(self) -> float:
        return self.C0 + self.C1


@dataclass(frozen=True)
class Violation:
    condition: str  # "i", "ii" or "iii"
    table: str
    witness: tuple[str, ...]
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def conditions(self) -> set[str]:
        return {v.condition for v in self.violations}

    def __str__(self) -> str:
        if self.ok:
            return "valid: conditions (i), (ii), (iii) hold"
        return "\n".join(f"({v.condition}) {v.message}" for v in self.violations)


def config_bits(index: int, n_local: int) -> str:
    return "".join("1" if (index >> k) & 1 else "0" for k in range(n_local))


def local_index(local) -> int:
    bits = np.asarray(local, dtype=np.int64).reshape(-1)
    if np.any((bits != 0) & (bits != 1)):
        raise RateSpecError(f"local configuration must be 0/1, got {local!r}")
    return int(np.dot(bits, 1 << np.arange(bits.size, dtype=np.int64)))


def _occupied_neighbours(d: int, R: int) -> np.ndarray:
    """Number of occupied strict neighbours for every local configuration."""
    n_local = (2 * R + 1) ** d
    idx = np.arange(1 << n_local, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(n_local)) & 1
    center = (n_local - 1) // 2
    return bits.sum(axis=1) - bits[:, center]


def contact(lam: float, d: int = 1, R: int = 1, delta: float = 1.0) -> RateSpec:
    """Contact process: recovery at rate ``delta``, infection ``lam`` per occupied neighbour."""
    if R < 1:
        raise RateSpecError("contact process needs R >= 1")
    count = _occupied_neighbours(d, R)
    c1 = lam * count.astype(np.float64)
    c0 = np.full(c1.shape, float(delta))
    params = {"lambda": float(lam)} if delta == 1.0 else {"lambda": float(lam), "delta": float(delta)}
    return RateSpec(d, R, c0, c1, kind="contact", params=params)


def threshold(lam: float, k: int, d: int = 1, R: int = 1, delta: float = 1.0) -> RateSpec:
    """Birth at rate ``lam`` once at least ``k`` strict neighbours are occupied."""
    if k < 1:
        raise RateSpecError("threshold k must be >= 1 for 0 to be absorbing")
    count = _occupied_neighbours(d, R)
    c1 = lam * (count >= k).astype(np.float64)
    c0 = np.full(c1.shape, float(delta))
    params = {"lambda": float(lam), "k": int(k)}
    if delta != 1.0:
        params["delta"] = float(delta)
    return RateSpec(d, R, c0, c1, kind="threshold", params=params)


def pure_death(delta: float, d: int = 1, R: int = 0) -> RateSpec:
    n = 1 << ((2 * R + 1) ** d)
    return RateSpec(d, R, np.full(n, float(delta)), np.zeros(n), kind="pure_death", params={"delta": float(delta)})


def from_config(model: Mapping[str, Any]) -> RateSpec:
    """Build a spec from the ``[model]`` mapping of a configuration document."""
    try:
        d = int(model.get("d", 1))
        R = int(model["R"]) if "R" in model else None
        kind = str(model.get("kind", "table"))
    except (TypeError, ValueError) as exc:
        raise RateSpecError(f"malformed model section: {exc}") from exc
    if kind not in BUILTIN_KINDS:
        raise RateSpecError(f"unknown built-in model {kind!r}; expected one of {BUILTIN_KINDS}")

    def num(key, default=None):
        if key not in model:
            if default is None:
                raise RateSpecError(f"model.{key} is required for kind={kind}")
            return default
        try:
            return float(model[key])
        except (TypeError, ValueError) as exc:
            raise RateSpecError(f"model.{key} must be a number") from exc

    if kind == "contact":
        return contact(num("lambda"), d=d, R=1 if R is None else R, delta=num("delta", 1.0))
    if kind == "threshold":
        return threshold(num("lambda"), int(num("k")), d=d, R=1 if R is None else R, delta=num("delta", 1.0))
    if kind == "pure_death":
        return pure_death(num("delta"), d=d, R=0 if R is None else R)
    if R is None:
        raise RateSpecError("model.R is required for kind=table")
    try:
        c0 = np.asarray(model["c0_table"], dtype=np.float64)
        c1 = np.asarray(model["c1_table"], dtype=np.float64)
    except KeyError as exc:
        raise RateSpecError(f"kind=table needs model.{exc.args[0]}") from exc
    except (TypeError, ValueError) as exc:
        raise RateSpecError(f"rate tables must be numeric arrays: {exc}") from exc
    return RateSpec(d, R, c0, c1)


def parse_rate_spec(text: str) -> RateSpec:
    """Parse a TOML document with a ``[model]`` section into a materialized spec."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise RateSpecError(f"malformed configuration: {exc}") from exc
    if "model" not in doc or not isinstance(doc["model"], dict):
        raise RateSpecError("configuration has no [model] section")
    return from_config(doc["model"])


def normalize(spec: RateSpec) -> RateSpec:
    """Overwrite entries that never influence the dynamics.

    c1 only matters when the centre is 0 and c0 only when it is 1, so
    c1(xi) := c1(xi^{0,0}) for xi(0)=1 and c0(xi) := c0(xi^{0,1}) for xi(0)=0.
    """
    bit = 1 << spec.center_bit
    idx = np.arange(1 << spec.n_local)
    c0 = np.array(spec.c0)
    c1 = np.array(spec.c1)
    on = (idx & bit) != 0
    c1[on] = spec.c1[idx[on] & ~bit]
    c0[~on] = spec.c0[idx[~on] | bit]
    return spec.with_tables(c0, c1)


def validate(spec: RateSpec) -> ValidationReport:
    n_local = spec.n_local
    full = spec.all_ones
    out: list[Violation] = []
    for k in range(n_local):
        bit = 1 << k
        lo = np.arange(1 << n_local)
        lo = lo[(lo & bit) == 0]
        hi = lo | bit
        for name, tab, sign in (("c1", spec.c1, 1.0), ("c0", spec.c0, -1.0)):
            bad = np.nonzero(sign * (tab[lo] - tab[hi]) > 0)[0]
            for j in bad:
                a, b = config_bits(int(lo[j]), n_local), config_bits(int(hi[j]), n_local)
                rel = "<=" if name == "c1" else ">="
                out.append(Violation(
                    "i", name, (a, b),
                    f"monotonicity: {name}({a}) = {tab[lo[j]]:g} but {name}({b}) = {tab[hi[j]]:g}; need {rel}",
                ))
    zero = config_bits(0, n_local)
    if spec.c1[0] != 0:
        out.append(Violation("ii", "c1", (zero,), f"absorbing: c1({zero}) = {spec.c1[0]:g} != 0"))
    ones = config_bits(full, n_local)
    if not spec.c1[full] > 0:
        out.append(Violation("iii", "c1", (ones,), f"non-degeneracy: c1({ones}) = {spec.c1[full]:g}, need > 0"))
    return ValidationReport(out)


def constants(spec: RateSpec) -> RateConstants:
    C0 = float(spec.c0.max())
    C1 = float(spec.c1.max())
    if C0 + C1 <= 0:
        raise RateSpecError("degenerate dynamics: M = C0 + C1 = 0")
    if C0 != spec.c0[0] or C1 != spec.c1[spec.all_ones]:
        raise RateSpecError(
            "maxima not attained at all-zeros/all-ones; normalize and validate the rate tables first"
        )
    return RateConstants(C0, C1)


def rate_lookup(spec: RateSpec, local) -> tuple[float, float]:
    bits = np.asarray(local).reshape(-1)
    if bits.size != spec.n_local:
        raise RateSpecError(f"local configuration has {bits.size} sites, expected {spec.n_local}")
    i = local_index(bits)
    return float(spec.c0[i]), float(spec.c1[i])


def random_monotone_spec(rng: np.random.Generator, d: int = 1, R: int = 1, n_terms: int = 3) -> RateSpec:
    """Random spec satisfying (i)-(iii), built from up-set indicators.

    c1 is a positive combination of 1{xi >= S} over non-empty S and c0 a
    positive constant plus a combination of 1{xi = 0 on S}.
    """
    if R < 1:
        raise RateSpecError("random specs need R >= 1")
    n_local = (2 * R + 1) ** d
    center = 1 << ((n_local - 1) // 2)
    idx = np.arange(1 << n_local)
    c1 = np.zeros(idx.size)
    c0 = np.full(idx.size, rng.uniform(0.2, 1.5))
    for _ in range(n_terms):
        S = 0
        while S == 0:
            S = int(rng.integers(1, 1 << n_local)) & ~center
        c1 += rng.uniform(0.1, 1.0) * ((idx & S) == S)
        S = int(rng.integers(1, 1 << n_local))
        c0 += rng.uniform(0.0, 0.5) * ((idx & S) == 0)
    return normalize(RateSpec(d, R, c0, c1))


def branching_bound(spec: RateSpec) -> float:
    """M / c1(1), the constant comparing influences with pivotal probabilities."""
    c1_full = float(spec.c1[spec.all_ones])
    if c1_full <= 0:
        return math.inf
    return constants(spec).M / c1_full
