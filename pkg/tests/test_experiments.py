import hashlib
import json
import math

import numpy as np
import pytest

from ipsharp import oracle
from ipsharp.experiments import (ConfigError, ExperimentConfig, GridResult, coupling_audit, diff_ineq_check,
                                 eps_to_h, fit_decay, growth_exponent, h1_closed_form_derivative, is_plateau,
                                 parse_config, run_manifest, sharpness_sweep, simulate_grid)
from ipsharp.output import OutputError
from ipsharp.rates import constants, contact, random_monotone_spec

BASE = '[model]\nd = 1\nR = 1\nkind = "contact"\nlambda = 0.7\n'


@pytest.mark.parametrize("run, msg", [
    ("T_grid = [1.0, 0.5]", "strictly increasing"),
    ("h_grid = [0.0, 1.5]", r"\[0, 1\]"),
    ("reps = 0", "reps"),
    ("m = -1", "m must"),
    ("bogus = 1", "unknown"),
    ("T_grid = []", "empty"),
])
def test_config_validation(run, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(BASE + "[run]\n" + run + "\n")


def test_config_errors_from_model_and_syntax():
    with pytest.raises(ConfigError):
        parse_config('[run]\nm = 1\n')
    with pytest.raises(ConfigError, match="malformed"):
        parse_config('[model\n')


def test_config_hash_tracks_numbers_not_threads():
    cfg = parse_config(BASE + "[run]\nm = 1\nT_grid = [0.5, 1.0]\nreps = 100\n[knobs]\nt = 0.3\n")
    assert cfg.T_grid == (0.5, 1.0) and cfg.knob("t") == 0.3 and cfg.knob("x", 7) == 7
    assert cfg.config_hash() == cfg.with_overrides(threads=4).config_hash()
    assert cfg.config_hash() != cfg.with_overrides(reps=200).config_hash()
    assert cfg.with_overrides(seed=None) == cfg


def test_zero_time_and_h_one_closed_forms():
    spec = contact(0.7)
    M = constants(spec).M
    Ts = [0.0, 0.5, 1.0]
    g = simulate_grid(spec, 1, [1.0], Ts, 20_000, seed=1)
    assert g.theta(0, 0).mean == 1.0 and g.sigma(0, 0).mean == 0.0
    for c, T in enumerate(Ts[1:], start=1):
        assert g.theta(0, c).within(math.exp(-M * T))
        assert g.sigma(0, c).within((1 - math.exp(-M * T)) / M)


def test_grid_orderings():
    spec = contact(1.2)
    hs, Ts = [0.0, 0.2, 0.5, 1.0], [0.5, 1.0, 2.0, 4.0]
    g = simulate_grid(spec, 2, hs, Ts, 5000, seed=2)
    assert g.h_order_violations == 0
    assert np.all(np.diff(g.hits, axis=0) <= 0)
    # theta is non-increasing and Sigma is increasing in T (shared trajectories)
    assert np.all(np.diff(g.hits, axis=1) <= 0)
    assert np.all(np.diff(g.occ, axis=1) >= 0)
    assert len(g.rows()) == 16


def test_grid_thread_invariance():
    spec = contact(0.7)
    a = simulate_grid(spec, 1, [0.0, 0.5], [1.0], 7000, seed=3, threads=1)
    b = simulate_grid(spec, 1, [0.0, 0.5], [1.0], 7000, seed=3, threads=3)
    assert np.array_equal(a.hits, b.hits) and np.array_equal(a.occ, b.occ)


def test_eps_to_h():
    assert eps_to_h(0.0, 3.0) == (0.0, 1.0)
    assert eps_to_h(3.0, 3.0) == (0.5, 2.0)
    assert eps_to_h(math.inf, 3.0)[0] == 1.0
    with pytest.raises(ValueError):
        eps_to_h(-1.0, 3.0)


@pytest.mark.parametrize("m, T", [(0, 1.0), (1, 0.7), (1, 2.0)])
def test_h_one_derivative_closed_form(m, T):
    spec = contact(0.9)
    assert h1_closed_form_derivative(spec, m, T) == pytest.approx(oracle.exact_theta_derivative(spec, m, 1.0, T), abs=1e-9)


def test_h_one_derivative_random_spec():
    spec = random_monotone_spec(np.random.default_rng(11))
    assert h1_closed_form_derivative(spec, 1, 1.3) == pytest.approx(oracle.exact_theta_derivative(spec, 1, 1.0, 1.3), abs=1e-9)


def test_diff_ineq_contact_grid():
    cfg = ExperimentConfig(contact(0.7), m=1, T_grid=(0.0, 0.5, 1.0, 2.0), h_grid=tuple(np.round(np.linspace(0, 1, 11), 2)))
    rows = diff_ineq_check(cfg)
    assert len(rows) == 44
    assert all(r.status == "pass" for r in rows), [r.as_row() for r in rows if r.status != "pass"]
    assert all(r.derivative_source == "oracle" and r.budget > 0 for r in rows if r.T > 0)
    assert all(r.corollary_status == "n/a" for r in rows if r.T < 1)
    assert all(r.corollary_status == "pass" for r in rows if r.T >= 1 and 0 < r.h < 1)


def test_diff_ineq_monte_carlo_path():
    cfg = ExperimentConfig(contact(0.7), m=1, T_grid=(1.0,), h_grid=(0.3,), reps=20_000, knobs={"oracle_cap": 4})
    (row,) = diff_ineq_check(cfg, russo_samples=20_000)
    assert row.derivative_source == "russo-mc" and row.sigma_source == "occupation-mc"
    assert row.status == "pass"


def _grid(Ts, p, reps=10_000, hs=(0.5,)):
    hits = np.round(np.atleast_2d(p) * reps).astype(np.int64)
    z = np.zeros(hits.shape)
    return GridResult(contact(1.0), 1, np.asarray(hs, float), np.asarray(Ts, float), reps, 0, hits, z, z)


def test_fit_decay_recovers_rate():
    Ts = np.array([0.5, 1.0, 2.0, 3.0, 4.0, 5.0])
    g = _grid(Ts, 0.8 * np.exp(-0.6 * Ts))
    fit = fit_decay(g, 0, 10 / math.sqrt(g.reps))
    assert fit.status == "ok" and fit.rate == pytest.approx(0.6, abs=5e-3)
    # the 10 / sqrt(reps) floor drops T = 4 and 5
    assert fit.r2 > 0.999 and fit.n_points == 4 and fit.T_range == (0.5, 3.0)
    assert math.exp(fit.intercept) == pytest.approx(0.8, rel=1e-2)


def test_fit_decay_without_usable_range():
    Ts = np.array([1.0, 2.0, 3.0, 4.0])
    g = _grid(Ts, np.exp(-5.0 * Ts))
    fit = fit_decay(g, 0, 10 / math.sqrt(g.reps))
    assert fit.status == "no usable T-range" and math.isnan(fit.rate)


def test_plateau_rule():
    Ts = np.array([1.0, 2.0, 4.0, 8.0])
    flat = _grid(Ts, [0.6, 0.58, 0.57, 0.565])
    assert is_plateau(flat, 0, 0.1, 0.1)
    decaying = _grid(Ts, np.exp(-0.3 * Ts))
    assert not is_plateau(decaying, 0, 0.1, 0.01)


def test_growth_exponent_synthetic():
    Ts = np.array([1.0, 2.0, 4.0, 8.0, 16.0, 32.0])
    assert growth_exponent(Ts, 0.7 * Ts) == pytest.approx(1.0)
    assert growth_exponent(Ts, 1 - np.exp(-Ts)) == pytest.approx(0.0, abs=1e-3)
    assert math.isnan(growth_exponent(Ts[:2], Ts[:2]))


def test_sharpness_smoke():
    cfg = ExperimentConfig(contact(0.7), m=4, T_grid=(0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 2.0, 4.0), h_grid=(0.0, 0.5, 1.0),
                           reps=4000, seed=1)
    rep = sharpness_sweep(cfg)
    assert 0.0 <= rep.h1 <= 1.0
    M = constants(cfg.spec).M
    f1 = rep.fits[1.0]
    assert f1.status == "ok" and abs(f1.rate - M) <= 3 * f1.rate_se + 0.05 * M
    assert set(rep.summary()) >= {"h1", "fits", "noise_floor"}
    assert len(rep.theta_table()) == 24


def test_coupling_audit_clean():
    audit = coupling_audit(random_monotone_spec(np.random.default_rng(4)), 1, 1.5, 300, seed=5)
    assert audit.total() == 0 and audit.trials == 300


def test_run_manifest(tmp_path):
    cfg = ExperimentConfig(contact(0.7), reps=10)
    path = run_manifest(cfg, {"a.csv": "x\n1\n"}, tmp_path, command="estimate-theta")
    first = path.read_bytes()
    run_manifest(cfg, {"a.csv": "x\n1\n"}, tmp_path, command="estimate-theta")
    assert path.read_bytes() == first
    man = json.loads(first)
    assert man["outputs"]["a.csv"] == hashlib.sha256(b"x\n1\n").hexdigest()
    assert man["config_hash"] == cfg.config_hash()


def test_run_manifest_missing_directory(tmp_path):
    missing = tmp_path / "nope"
    with pytest.raises(OutputError):
        run_manifest(ExperimentConfig(contact(0.7)), {"a.csv": "x\n"}, missing)
    assert not missing.exists()
