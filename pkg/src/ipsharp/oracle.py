"""Exact transient computations for the truncated dynamics on a small box.

States are bitmasks over the sites of Lambda_m (bit i = box index i), and
sites outside the box read as 0.  Transient probabilities are computed by
uniformization: with P = I + Q / q and q >= max |Q_ii|,

    p_T = sum_k Poisson(k; qT) p_0 P^k.

Only the marginal at the target is needed, so we keep the scalar sequence
a_k = (p_0 P^k)(target = 1), which gives theta at every T at once.  The
h-derivative uses the block operator [[Q, dQ], [0, Q]]: its upper-right
exponential block is d/dh exp(TQ_h).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.stats import poisson

from .lattice import Box
from .rates import RateSpec, constants

DEFAULT_STATE_CAP = 1 << 20
SERIES_TOL = 1e-13
MAX_UNIFORM_MASS = 5e6


class OracleError(RuntimeError):
    pass


@dataclass(eq=False)
class GeneratorMatrix:
    spec: RateSpec
    box: Box
    h: float
    M: float
    Q: sp.csr_matrix
    dQ: sp.csr_matrix
    _a: np.ndarray = field(default=None, repr=False)
    _b: np.ndarray = field(default=None, repr=False)
    _target: int = field(default=-1, repr=False)

    @property
    def n_states(self) -> int:
        return self.Q.shape[0]

    @property
    def rate(self) -> float:
        """Uniformization rate: max |diagonal| (at least a tiny positive number)."""
        return max(float(-self.Q.diagonal().min()), 1e-300)


def _local_indices(box: Box, R: int, states: np.ndarray) -> np.ndarray:
    nbr = box.neighbor_table(R)
    out = np.zeros((box.n, states.size), dtype=np.int64)
    for x in range(box.n):
        for k, j in enumerate(nbr[x]):
            if j >= 0:
                out[x] |= ((states >> j) & 1) << k
    return out


def build_generator(spec: RateSpec, m: int, h: float, cap: int = DEFAULT_STATE_CAP) -> GeneratorMatrix:
    """Generator of the perturbed dynamics on Lambda_m with zero boundary.

    rate(xi -> xi^{x,1}) = (1-h) c1 and rate(xi -> xi^{x,0}) = (1-h) c0 + M h.
    """
    if not 0.0 <= h <= 1.0:
        raise OracleError(f"h must lie in [0, 1], got {h}")
    box = Box(m, spec.d)
    n_states = 1 << box.n
    if box.n > 62 or n_states > cap:
        raise OracleError(f"2^{box.n} states exceed the cap {cap}")
    M = constants(spec).M
    states = np.arange(n_states, dtype=np.int64)
    loc = _local_indices(box, spec.R, states)
    rows, cols, vals, dvals = [], [], [], []
    for x in range(box.n):
        on = ((states >> x) & 1).astype(bool)
        up = ~on
        rows.append(states[up])
        cols.append(states[up] | (1 << x))
        c1 = spec.c1[loc[x, up]]
        vals.append((1.0 - h) * c1)
        dvals.append(-c1)
        rows.append(states[on])
        cols.append(states[on] & ~(1 << x))
        c0 = spec.c0[loc[x, on]]
        vals.append((1.0 - h) * c0 + M * h)
        dvals.append(M - c0)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    dv = np.concatenate(dvals)
    Q = _with_diagonal(r, c, v, n_states)
    dQ = _with_diagonal(r, c, dv, n_states)
    return GeneratorMatrix(spec, box, float(h), M, Q, dQ)


def _with_diagonal(r, c, v, n):
    off = sp.csr_matrix((v, (r, c)), shape=(n, n))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def _series_length(mass: float) -> int:
    if mass > MAX_UNIFORM_MASS:
        raise OracleError(f"uniformization mass qT = {mass:.3g} too large")
    if mass == 0:
        return 0
    # the derivative terms grow linearly in k, so cut the k-weighted tail
    k = int(poisson.isf(SERIES_TOL / (1.0 + mass), mass)) + 10
    return k


def _poisson_weights(K: int, mass: float) -> np.ndarray:
    if mass == 0:
        w = np.zeros(K + 1)
        w[0] = 1.0
        return w
    w = poisson.pmf(np.arange(K + 1), mass)
    if not np.all(np.isfinite(w)):
        raise OracleError("non-finite Poisson weights")
    return w


def _extend(G: GeneratorMatrix, K: int, target: int, derivative: bool) -> None:
    """Make sure the scalar sequences a_k (and b_k) exist up to index K."""
    have = -1 if G._a is None or G._target != target else G._a.size - 1
    have_b = -1 if G._b is None or G._target != target else G._b.size - 1
    if have >= K and (not derivative or have_b >= K):
        return
    q = G.rate
    QT = (G.Q.T / q).tocsr()
    DT = (G.dQ.T / q).tocsr()
    n = G.n_states
    ones = n - 1
    g = ((np.arange(n) >> target) & 1).astype(np.float64)
    p = np.zeros(n)
    p[ones] = 1.0
    d = np.zeros(n)
    a = np.empty(K + 1)
    b = np.empty(K + 1) if derivative else None
    for k in range(K + 1):
        a[k] = p @ g
        if derivative:
            b[k] = d @ g
            d = d + QT @ d + DT @ p
        p = p + QT @ p
    G._a = a
    G._b = b if derivative else (G._b if G._target == target else None)
    G._target = target


def theta_curve(G: GeneratorMatrix, ts, target: int | None = None) -> np.ndarray:
    """P(X_t(target) = 1) from all ones, for every t in ``ts``."""
    target = G.box.origin if target is None else target
    ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    if np.any(ts < 0):
        raise OracleError("negative time")
    q = G.rate
    K = _series_length(q * float(ts.max())) if ts.size else 0
    _extend(G, K, target, derivative=False)
    out = np.empty(ts.size)
    for j, t in enumerate(ts):
        kt = _series_length(q * t)
        w = _poisson_weights(kt, q * t)
        out[j] = float(np.dot(w, G._a[: kt + 1]))
    return np.clip(out, 0.0, 1.0)


def exact_theta(G: GeneratorMatrix, T: float, target: int | None = None) -> float:
    return float(theta_curve(G, [T], target)[0])


def derivative_curve(G: GeneratorMatrix, ts, target: int | None = None) -> np.ndarray:
    target = G.box.origin if target is None else target
    ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    q = G.rate
    K = _series_length(q * float(ts.max())) if ts.size else 0
    _extend(G, K, target, derivative=True)
    out = np.empty(ts.size)
    for j, t in enumerate(ts):
        kt = _series_length(q * t)
        w = _poisson_weights(kt, q * t)
        # d/dh exp(tQ) = sum_k w_k(qt) * (upper-right block of (I + A/q)^k)
        out[j] = float(np.dot(w, G._b[: kt + 1]))
    return out


def exact_theta_derivative(spec: RateSpec, m: int, h: float, T: float, cap: int = DEFAULT_STATE_CAP) -> float:
    return float(derivative_curve(build_generator(spec, m, h, cap), [T])[0])


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-9, max_depth: int = 50) -> float:
    """Adaptive Simpson quadrature with Richardson correction."""
    if b <= a:
        return 0.0

    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        err = left + right - whole
        if depth <= 0 or abs(err) <= 15.0 * tol:
            return left + right + err / 15.0
        return rec(a, m, fa, flm, fm, left, tol / 2, depth - 1) + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1)

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def sigma_from_generator(G: GeneratorMatrix, T: float, target: int | None = None, tol: float = 1e-9) -> float:
    theta_curve(G, [T], target)  # warm the series once
    return adaptive_simpson(lambda t: float(theta_curve(G, [t], target)[0]), 0.0, float(T), tol)


def exact_sigma(spec: RateSpec, m: int, h: float, T: float, cap: int = DEFAULT_STATE_CAP) -> float:
    """Integral of theta_s over [0, T] (adaptive Simpson, absolute tolerance 1e-9)."""
    return sigma_from_generator(build_generator(spec, m, h, cap), T)


def sigma_series(G: GeneratorMatrix, T: float, target: int | None = None) -> float:
    """Same integral in closed form: int_0^T Poisson(k; qs) ds = P(Poisson(qT) > k) / q."""
    target = G.box.origin if target is None else target
    q = G.rate
    K = _series_length(q * T)
    _extend(G, K, target, derivative=False)
    tail = poisson.sf(np.arange(K + 1), q * T)
    return float(np.dot(tail, G._a[: K + 1]) / q)


def oracle_table(spec: RateSpec, ms, hs, Ts, cap: int = DEFAULT_STATE_CAP) -> list[dict]:
    """Rows (m, h, T, theta_exact, dtheta_dh_exact, sigma_exact)."""
    rows = []
    for m in ms:
        for h in hs:
            G = build_generator(spec, m, h, cap)
            th = theta_curve(G, Ts)
            dth = derivative_curve(G, Ts)
            for T, a, b in zip(Ts, th, dth):
                rows.append({
                    "m": int(m), "h": float(h), "T": float(T),
                    "theta_exact": float(a), "dtheta_dh_exact": float(b),
                    "sigma_exact": sigma_from_generator(G, T),
                })
    return rows


def single_site_theta(rho: float, T: float) -> float:
    return math.exp(-rho * T)


def _uniformized_apply(G: GeneratorMatrix, vec: np.ndarray, t: float, transpose: bool) -> np.ndarray:
    """exp(tQ)^T vec (distribution push-forward) or exp(tQ) vec (expectation)."""
    q = G.rate
    K = _series_length(q * t)
    w = _poisson_weights(K, q * t)
    P = (G.Q.T / q).tocsr() if transpose else (G.Q / q).tocsr()
    cur = vec.astype(np.float64).copy()
    out = w[0] * cur
    for k in range(1, K + 1):
        cur = cur + P @ cur
        out += w[k] * cur
    return out


def exact_pivotal_probability(spec: RateSpec, m: int, h: float, x: int, t: float, u: float, T: float,
                              cap: int = DEFAULT_STATE_CAP) -> float:
    """P_h((x, t, u) is T-pivotal) for the truncated dynamics, exactly.

    With p the law of X_{t-} and g(xi) = P_xi(X_{T-t}(target) = 1), the two
    forced continuations are ordered pathwise, so
    P(pivotal) = sum_xi p(xi) 1{A-atom gives 1} (g(xi^{x,1}) - g(xi^{x,0})).
    """
    G = build_generator(spec, m, h, cap)
    n = G.n_states
    states = np.arange(n, dtype=np.int64)
    p0 = np.zeros(n)
    p0[n - 1] = 1.0
    p = _uniformized_apply(G, p0, t, transpose=True)
    g = _uniformized_apply(G, ((states >> G.box.origin) & 1).astype(np.float64), T - t, transpose=False)
    loc = _local_indices(G.box, spec.R, states)[x]
    own = (states >> x) & 1
    c0 = spec.c0[loc]
    c1 = spec.c1[loc]
    a = np.where(u < c0, 0, np.where(u < G.M - c1, own, 1))
    up = states | (1 << x)
    down = states & ~(1 << x)
    return float(np.sum(p * a * (g[up] - g[down])))
