import math

import numpy as np
import pytest
from scipy.linalg import expm_frechet

from ipsharp import oracle
from ipsharp.experiments import simulate_grid
from ipsharp.lattice import Box
from ipsharp.rates import RateSpec, constants, contact, random_monotone_spec

# theta_T^1(h) and its h-derivative for contact(0.7), d=1, from dense expm / expm_frechet
FROZEN = [
    (0.0, 0.5, 0.6830835498166757, -0.4468771653392848),
    (0.0, 1.0, 0.5176870220386945, -0.6623473352380933),
    (0.0, 2.0, 0.3112594305231349, -0.7980487801882992),
    (0.2, 0.5, 0.5954238219171979, -0.4281865475291591),
    (0.2, 1.0, 0.39361260625328337, -0.5744930840193025),
    (0.2, 2.0, 0.17864844998543886, -0.5326970386574378),
    (0.5, 0.5, 0.4729241355455095, -0.3862734763651112),
    (0.5, 1.0, 0.24408969651698506, -0.42163896329549166),
    (0.5, 2.0, 0.06681128963603535, -0.23892201980171954),
    (1.0, 0.5, 0.3011942119122022, -0.2988940791471224),
    (1.0, 1.0, 0.09071795328941097, -0.2058921489034595),
    (1.0, 2.0, 0.008229747049019886, -0.04132540612553684),
]


def dense_generator(spec, m, h):
    """Q_h and dQ/dh written out state by state (independent of the package assembly)."""
    box = Box(m, spec.d)
    M = constants(spec).M
    n = 1 << box.n
    Q = np.zeros((n, n))
    dQ = np.zeros((n, n))
    for s in range(n):
        for x in range(box.n):
            c = box.coord(x)
            k = 0
            for j, o in enumerate(spec.offsets):
                y = tuple(np.add(c, o))
                if box.contains(y) and (s >> box.index(y)) & 1:
                    k |= 1 << j
            if (s >> x) & 1:
                rate, drate, t = (1 - h) * spec.c0[k] + M * h, M - spec.c0[k], s & ~(1 << x)
            else:
                rate, drate, t = (1 - h) * spec.c1[k], -spec.c1[k], s | (1 << x)
            Q[s, t] += rate
            Q[s, s] -= rate
            dQ[s, t] += drate
            dQ[s, s] -= drate
    return box, Q, dQ


@pytest.mark.parametrize("h, T, theta, dtheta", FROZEN)
def test_frozen_values(h, T, theta, dtheta):
    G = oracle.build_generator(contact(0.7), 1, h)
    assert oracle.exact_theta(G, T) == pytest.approx(theta, abs=1e-12)
    assert oracle.exact_theta_derivative(contact(0.7), 1, h, T) == pytest.approx(dtheta, abs=1e-11)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dense_cross_check_random_specs(seed):
    spec = random_monotone_spec(np.random.default_rng(seed))
    h, T = 0.35, 1.3
    box, Q, dQ = dense_generator(spec, 1, h)
    ones = (1 << box.n) - 1
    target = (np.arange(1 << box.n) >> box.origin) & 1
    E, dE = expm_frechet(T * Q, T * dQ)
    G = oracle.build_generator(spec, 1, h)
    assert oracle.exact_theta(G, T) == pytest.approx(E[ones] @ target, abs=1e-12)
    assert oracle.exact_theta_derivative(spec, 1, h, T) == pytest.approx(dE[ones] @ target, abs=1e-11)


def test_generator_assembly_matches_dense():
    spec = contact(0.7)
    for h in (0.0, 0.4, 1.0):
        _, Q, _ = dense_generator(spec, 1, h)
        assert np.allclose(oracle.build_generator(spec, 1, h).Q.toarray(), Q, atol=1e-14)


def test_generator_invariants():
    spec = random_monotone_spec(np.random.default_rng(5))
    Q = oracle.build_generator(spec, 2, 0.3).Q.toarray()
    assert np.abs(Q.sum(axis=1)).max() < 1e-12
    off = Q - np.diag(np.diag(Q))
    assert off.min() >= 0
    r, c = np.nonzero(off)
    assert all(bin(a ^ b).count("1") == 1 for a, b in zip(r, c))


def test_single_site_contact_generator():
    lam, h = 0.7, 0.3
    Q = oracle.build_generator(contact(lam), 0, h).Q.toarray()
    assert Q[1, 0] == pytest.approx((1 - h) + (1 + 2 * lam) * h)
    assert Q[0, 1] == 0


def test_all_zero_state_absorbing_and_h_one_kills():
    spec = contact(1.3)
    M = constants(spec).M
    Q = oracle.build_generator(spec, 1, 0.0).Q.toarray()
    assert np.all(Q[0] == 0)
    Q1 = oracle.build_generator(spec, 1, 1.0).Q.toarray()
    for s in range(8):
        for x in range(3):
            t = s ^ (1 << x)
            if (s >> x) & 1:
                assert Q1[s, t] >= M
            else:
                assert Q1[s, t] == 0


def test_cap_exceeded():
    with pytest.raises(oracle.OracleError):
        oracle.build_generator(contact(0.7), 3, 0.0, cap=1 << 6)


def test_negative_time_rejected():
    with pytest.raises(oracle.OracleError):
        oracle.theta_curve(oracle.build_generator(contact(0.7), 0, 0.0), [-1.0])


@pytest.mark.parametrize("delta, h, T", [(0.3, 0.0, 1.0), (1.0, 0.5, 2.0), (2.0, 0.9, 0.7)])
def test_pure_death_closed_forms(delta, h, T):
    spec = RateSpec(1, 0, [delta, delta], [0.0, 0.0])
    M = delta
    rho = M * h + (1 - h) * delta
    G = oracle.build_generator(spec, 0, h)
    assert oracle.exact_theta(G, T) == pytest.approx(math.exp(-rho * T), abs=1e-12)
    assert oracle.exact_sigma(spec, 0, h, T) == pytest.approx((1 - math.exp(-rho * T)) / rho, abs=1e-9)
    assert oracle.exact_theta_derivative(spec, 0, h, T) == pytest.approx(-(M - delta) * T * math.exp(-rho * T), abs=1e-12)


@pytest.mark.parametrize("lam, h, T", [(0.7, 0.0, 1.0), (0.7, 0.4, 2.0), (2.0, 1.0, 0.5)])
def test_single_site_contact_closed_forms(lam, h, T):
    spec = contact(lam)
    M = 1 + 2 * lam
    rho = 1 + 2 * lam * h
    assert oracle.exact_theta(oracle.build_generator(spec, 0, h), T) == pytest.approx(math.exp(-rho * T), abs=1e-12)
    assert oracle.exact_theta_derivative(spec, 0, h, T) == pytest.approx(-(M - 1) * T * math.exp(-rho * T), abs=1e-12)
    assert oracle.exact_sigma(spec, 0, h, T) == pytest.approx((1 - math.exp(-rho * T)) / rho, abs=1e-9)


def test_time_zero():
    G = oracle.build_generator(contact(0.7), 1, 0.3)
    assert oracle.exact_theta(G, 0.0) == 1.0
    assert oracle.exact_sigma(contact(0.7), 1, 0.3, 0.0) == 0.0


def test_derivative_matches_central_differences():
    spec = contact(0.7)
    d = 1e-4
    for h in (0.1, 0.5, 0.9):
        for T in (0.5, 2.0):
            fd = (oracle.exact_theta(oracle.build_generator(spec, 1, h + d), T)
                  - oracle.exact_theta(oracle.build_generator(spec, 1, h - d), T)) / (2 * d)
            assert abs(fd - oracle.exact_theta_derivative(spec, 1, h, T)) < 1e-6


def test_derivative_nonpositive_and_bounded():
    worst = 0.0
    for seed in range(4):
        spec = random_monotone_spec(np.random.default_rng(seed))
        for h in np.linspace(0, 1, 6):
            G = oracle.build_generator(spec, 1, h)
            d = oracle.derivative_curve(G, np.linspace(0.1, 3.0, 12))
            assert np.all(d <= 1e-12)
            worst = max(worst, float(np.abs(d).max()))
    assert np.isfinite(worst)
    print(f"max |dtheta/dh| over the grid: {worst:.4f}")


def test_theta_monotone_in_time_and_box():
    spec = contact(1.5)
    ts = np.linspace(0, 4, 81)
    curves = [oracle.theta_curve(oracle.build_generator(spec, m, 0.1), ts) for m in (0, 1, 2)]
    for c in curves:
        assert np.all(np.diff(c) <= 1e-13)
    assert np.all(curves[0] <= curves[1] + 1e-13) and np.all(curves[1] <= curves[2] + 1e-13)


def test_sigma_monotone_and_quadrature_agrees_with_series():
    spec = contact(0.7)
    Ts = [0.5, 1.0, 2.0]
    hs = [0.0, 0.3, 0.7, 1.0]
    tab = np.array([[oracle.exact_sigma(spec, 1, h, T) for T in Ts] for h in hs])
    assert np.all(np.diff(tab, axis=1) > 0) and np.all(np.diff(tab, axis=0) < 0)
    for h in hs:
        G = oracle.build_generator(spec, 1, h)
        for T in Ts:
            assert oracle.sigma_series(G, T) == pytest.approx(oracle.sigma_from_generator(G, T), abs=1e-9)


def test_oracle_table_columns():
    rows = oracle.oracle_table(contact(0.7), [0, 1], [0.0, 0.5], [1.0])
    assert len(rows) == 4
    assert set(rows[0]) == {"m", "h", "T", "theta_exact", "dtheta_dh_exact", "sigma_exact"}


def test_monte_carlo_consistency_grid():
    spec = contact(0.7)
    ms, hs, Ts = (0, 1, 2), (0.0, 0.3, 1.0), (0.5, 1.0, 2.0)
    for m in ms:
        g = simulate_grid(spec, m, hs, Ts, 20_000, seed=m)
        for a, h in enumerate(hs):
            G = oracle.build_generator(spec, m, h)
            for c, T in enumerate(Ts):
                est = g.theta(a, c)
                assert est.within(oracle.exact_theta(G, T)), (m, h, T, est)


def exact_pivotal_integral(spec, m, h, T, n_t=24):
    """Integral of the exact pivotal probability over sites, u (exactly) and t (Gauss-Legendre)."""
    M = constants(spec).M
    cuts = np.unique(np.concatenate([[0.0, M], spec.c0, M - spec.c1]))
    cuts = cuts[(cuts >= 0) & (cuts <= M)]
    mids, widths = 0.5 * (cuts[1:] + cuts[:-1]), np.diff(cuts)
    nodes, weights = np.polynomial.legendre.leggauss(n_t)
    ts, wt = 0.5 * T * (nodes + 1), 0.5 * T * weights
    total = 0.0
    for x in range(Box(m, spec.d).n):
        for u, wu in zip(mids, widths):
            for t, w in zip(ts, wt):
                total += w * wu * oracle.exact_pivotal_probability(spec, m, h, x, t, u, T)
    return total


def test_exact_pivotal_integral_equals_minus_derivative():
    spec = contact(0.7)
    val = exact_pivotal_integral(spec, 1, 0.2, 1.0)
    assert val == pytest.approx(-oracle.exact_theta_derivative(spec, 1, 0.2, 1.0), abs=1e-6)
