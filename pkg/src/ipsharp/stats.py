"""Monte Carlo estimates, Wilson intervals and mergeable accumulators."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Z3 = 3.0


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int
    method: str = "mean"
    seed: int | None = None
    ci_lo: float = math.nan
    ci_hi: float = math.nan
    extra: dict = field(default_factory=dict, compare=False)

    def within(self, value: float, k: float = Z3, extra_sigma: float = 0.0) -> bool:
        """|mean - value| <= k * combined sigma."""
        return abs(self.mean - value) <= k * math.hypot(self.stderr, extra_sigma)

    def as_row(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, "method": self.method,
                "ci_lo": self.ci_lo, "ci_hi": self.ci_hi, "seed": self.seed}


def wilson(hits: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n <= 0:
        return 0.0, 1.0
    p = hits / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def bernoulli(hits: int, n: int, seed: int | None = None, scale: float = 1.0) -> Estimate:
    """Proportion estimate (optionally scaled by a positive mass) with a Wilson interval."""
    p = hits / n if n else math.nan
    se = math.sqrt(p * (1 - p) / n) if n else math.nan
    lo, hi = wilson(hits, n)
    return Estimate(scale * p, abs(scale) * se, n, "wilson", seed, scale * lo, scale * hi)


@dataclass
class Accumulator:
    """Count / sum / sum of squares; merging is exact and order independent for integer data."""

    n: int = 0
    s: float = 0.0
    ss: float = 0.0

    def add(self, x: np.ndarray) -> "Accumulator":
        x = np.asarray(x, dtype=np.float64)
        self.n += x.size
        self.s += float(x.sum())
        self.ss += float(np.dot(x.ravel(), x.ravel()))
        return self

    def merge(self, other: "Accumulator") -> "Accumulator":
        return Accumulator(self.n + other.n, self.s + other.s, self.ss + other.ss)

    @property
    def mean(self) -> float:
        return self.s / self.n if self.n else math.nan

    @property
    def var(self) -> float:
        if self.n < 2:
            return 0.0
        return max(0.0, (self.ss - self.s * self.s / self.n) / (self.n - 1))

    def estimate(self, scale: float = 1.0, seed: int | None = None, method: str = "mean") -> Estimate:
        se = math.sqrt(self.var / self.n) if self.n else math.nan
        m = scale * self.mean
        return Estimate(m, abs(scale) * se, self.n, method, seed, m - 1.96 * abs(scale) * se, m + 1.96 * abs(scale) * se)


def sample_estimate(x, scale: float = 1.0, seed: int | None = None, method: str = "mean") -> Estimate:
    return Accumulator().add(x).estimate(scale, seed, method)


def weighted_loglinear_fit(x, y, w) -> tuple[float, float, float, float]:
    """Weighted least squares y ~ a + b x; returns (a, b, stderr(b), weighted R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    W = w.sum()
    xm = np.dot(w, x) / W
    ym = np.dot(w, y) / W
    sxx = np.dot(w, (x - xm) ** 2)
    sxy = np.dot(w, (x - xm) * (y - ym))
    b = sxy / sxx
    a = ym - b * xm
    resid = y - a - b * x
    ss_res = np.dot(w, resid ** 2)
    ss_tot = np.dot(w, (y - ym) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = max(x.size - 2, 1)
    # weights are inverse variances: scale by the reduced chi^2 only when it exceeds 1
    chi2 = max(ss_res / dof, 1.0)
    se_b = math.sqrt(chi2 / sxx)
    return float(a), float(b), float(se_b), float(r2)
