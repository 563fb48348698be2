"""Command line entry point: ``ipsharp <command> --config run.toml [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 a numerical check
failed or could not be resolved within its error budget, 3 I/O error.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import explore, influence, oracle, pivotal
from .lattice import Box
from .output import OutputError, csv_text, json_text
from .rates import constants, validate

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

ESTIMATE_COLUMNS = ("h", "T", "m", "estimator", "mean", "stderr", "n", "seed")

SCHEMAS = {
    "validate": "prints the validation report and the constants C0, C1, M",
    "theta": "theta.csv: " + ",".join(ex.GRID_COLUMNS),
    "sigma": "sigma.csv: " + ",".join(ex.GRID_COLUMNS),
    "russo": "russo.csv: " + ",".join(ESTIMATE_COLUMNS) + " (estimator russo, and oracle when the box is small)",
    "pivotal": "pivotal.csv: " + ",".join(ESTIMATE_COLUMNS)
               + " (estimators pivotal-probability [knobs x,t,u], I, J, I-KJ)",
    "explore": "revelation.csv: " + ",".join(explore.REVELATION_COLUMNS + ("bound",))
               + "; determinism.json",
    "osss-check": "osss.json: rhs, variance, theta and z-measure estimates",
    "diff-ineq": "diff_ineq.csv: " + ",".join(ex.DIFF_COLUMNS),
    "sharpness": "sharpness_theta.csv: " + ",".join(ex.GRID_COLUMNS) + "; sharpness_fits.csv: "
                 + ",".join(ex.FIT_COLUMNS) + "; sharpness.json",
    "oracle": "oracle.csv: m,h,T,theta_exact,dtheta_dh_exact,sigma_exact",
    "brw-check": "brw.json (mean population vs exp(M(|Lambda_R|-1)T)); tail.csv: "
                 + ",".join(influence.TailProfile.COLUMNS),
}


class NumericFailure(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipsharp", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML file with [model], [run] and optional [knobs]")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--reps", type=int, help="override run.reps")
    common.add_argument("--threads", type=int, help="override run.threads (results do not depend on it)")
    common.add_argument("--out", help="output directory (must exist); stdout when omitted")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="format of tabular outputs")
    sub = p.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        sub.add_parser(name, parents=[common], help=schema.split(":")[0], epilog="output: " + schema)
    return p


def _table(rows, columns, fmt: str) -> str:
    if fmt == "json":
        return json_text([{c: r.get(c) for c in columns} for r in rows])
    return csv_text(rows, columns)


def _est_row(h, T, m, name, e, seed):
    return {"h": h, "T": T, "m": m, "estimator": name, "mean": e.mean, "stderr": e.stderr, "n": e.n, "seed": seed}


def _ext(name: str, fmt: str) -> str:
    return name if not name.endswith(".csv") or fmt == "csv" else name[:-4] + ".json"


def cmd_validate(cfg, fmt):
    rep = validate(cfg.spec)
    c = constants(cfg.spec)
    text = f"{cfg.spec.describe()}\n{rep}\nC0={c.C0!r} C1={c.C1!r} M={c.M!r}\n"
    if not rep.ok:
        raise ex.ConfigError(text)
    return {"validate.txt": text}, True


def cmd_grid(cfg, fmt, name):
    g = ex.simulate_grid(cfg.spec, cfg.m, cfg.h_grid, cfg.T_grid, cfg.reps, cfg.seed, cfg.threads)
    return {_ext(f"{name}.csv", fmt): _table(g.rows(), ex.GRID_COLUMNS, fmt)}, True


def cmd_russo(cfg, fmt):
    rows = []
    strat = bool(cfg.knob("stratify", False))
    exact = (1 << Box(cfg.m, cfg.spec.d).n) <= oracle.DEFAULT_STATE_CAP
    for h in cfg.h_grid:
        for T in cfg.T_grid:
            e = pivotal.russo_derivative_mc(cfg.spec, cfg.m, T, h, cfg.reps, int(cfg.knob("reps_per_sample", 1)),
                                            cfg.seed, cfg.threads, strat)
            rows.append(_est_row(h, T, cfg.m, e.method, e, cfg.seed))
            if exact:
                d = oracle.exact_theta_derivative(cfg.spec, cfg.m, h, T)
                rows.append({"h": h, "T": T, "m": cfg.m, "estimator": "oracle", "mean": d, "stderr": 0.0, "n": 0,
                             "seed": cfg.seed})
    return {_ext("russo.csv", fmt): _table(rows, ESTIMATE_COLUMNS, fmt)}, True


def cmd_pivotal(cfg, fmt):
    rows = []
    ok = True
    for h in cfg.h_grid:
        for T in cfg.T_grid:
            if "x" in cfg.knobs:
                q = pivotal.PivotalQuery(cfg.knob("x"), float(cfg.knob("t", T / 2)), float(cfg.knob("u", 0.0)), T, cfg.m, h)
                e = pivotal.pivotal_probability(q, cfg.spec, cfg.reps, cfg.seed, cfg.threads)
                rows.append(_est_row(h, T, cfg.m, "pivotal-probability", e, cfg.seed))
            I, J = pivotal.integrals_I_and_J(cfg.spec, cfg.m, T, h, cfg.reps, cfg.seed, cfg.threads)
            rows.append(_est_row(h, T, cfg.m, "I", I, cfg.seed))
            rows.append(_est_row(h, T, cfg.m, "J", J, cfg.seed))
            gap, gse = I.extra["gap_mean"], I.extra["gap_stderr"]
            rows.append({"h": h, "T": T, "m": cfg.m, "estimator": "I-KJ", "mean": gap, "stderr": gse, "n": I.n,
                         "seed": cfg.seed})
            ok &= gap <= 3 * gse
    return {_ext("pivotal.csv", fmt): _table(rows, ESTIMATE_COLUMNS, fmt)}, ok


def cmd_explore(cfg, fmt):
    h, T, m, spec = cfg.h, cfg.T, cfg.m, cfg.spec
    det = explore.determinism_trials(spec, m, T, h, cfg.reps, cfg.seed, cfg.threads)
    n = int(cfg.knob("grid_points", 5))
    xs = [(k,) + (0,) * (spec.d - 1) for k in np.unique(np.linspace(-m, m, min(n, 2 * m + 1)).round().astype(int))]
    ts = list(np.linspace(T / n, T, n))
    rows = explore.revelation_grid(spec, h, T, m, xs, ts, cfg.reps, cfg.seed, cfg.threads)
    cap = (1 << Box(2 * m, spec.d).n) <= oracle.DEFAULT_STATE_CAP
    if cap:
        sigma = oracle.exact_sigma(spec, 2 * m, h, T)
    else:
        sigma = ex.simulate_grid(spec, 2 * m, [h], [T], cfg.reps, cfg.seed, cfg.threads).sigma(0, 0).mean
    bound = explore.revelation_bound(spec, T, sigma)
    ok = det["mismatches"] == 0
    for r in rows:
        r["bound"] = bound
        ok &= r["p_hat"] <= bound + 3 * r["stderr"]
    det["revelation_bound"] = bound
    return {_ext("revelation.csv", fmt): _table(rows, explore.REVELATION_COLUMNS + ("bound",), fmt),
            "determinism.json": json_text(det)}, ok


def cmd_osss(cfg, fmt):
    r = explore.osss_rhs(cfg.spec, cfg.h, cfg.T, cfg.m, int(cfg.knob("time_nodes", 16)), cfg.reps,
                         cfg.knob("influence_reps"), cfg.seed, cfg.threads)
    return {"osss.json": json_text(r.to_dict())}, r.holds()


def cmd_diff(cfg, fmt):
    rows = ex.diff_ineq_check(cfg)
    ok = all(r.status == "pass" for r in rows)
    return {_ext("diff_ineq.csv", fmt): _table([r.as_row() for r in rows], ex.DIFF_COLUMNS, fmt)}, ok


def cmd_sharpness(cfg, fmt):
    rep = ex.sharpness_sweep(cfg)
    return {_ext("sharpness_theta.csv", fmt): _table(rep.theta_table(), ex.GRID_COLUMNS, fmt),
            _ext("sharpness_fits.csv", fmt): _table(rep.fit_rows(), ex.FIT_COLUMNS, fmt),
            "sharpness.json": json_text(rep.summary())}, True


def cmd_oracle(cfg, fmt):
    ms = cfg.knob("m_grid", [cfg.m])
    rows = oracle.oracle_table(cfg.spec, ms, cfg.h_grid, cfg.T_grid)
    cols = ("m", "h", "T", "theta_exact", "dtheta_dh_exact", "sigma_exact")
    return {_ext("oracle.csv", fmt): _table(rows, cols, fmt)}, True


def cmd_brw(cfg, fmt):
    spec = cfg.spec
    M = float(cfg.knob("M", constants(spec).M))
    est, expected = influence.brw_mean_check(M, spec.R, spec.d, cfg.T, cfg.reps, cfg.seed)
    ok = est.within(expected)
    out = {"brw.json": json_text({"M": M, "R": spec.R, "d": spec.d, "T": cfg.T, "mean": est.mean,
                                  "stderr": est.stderr, "reps": est.n, "expected": expected, "within_3sigma": ok})}
    tail_reps = int(cfg.knob("tail_reps", 0))
    if tail_reps:
        prof = influence.cone_tail_profile(spec, cfg.T, cfg.h, tail_reps, cfg.seed)
        out[_ext("tail.csv", fmt)] = _table(prof.rows, influence.TailProfile.COLUMNS, fmt)
    return out, ok


COMMANDS = {
    "validate": cmd_validate,
    "theta": lambda c, f: cmd_grid(c, f, "theta"),
    "sigma": lambda c, f: cmd_grid(c, f, "sigma"),
    "russo": cmd_russo,
    "pivotal": cmd_pivotal,
    "explore": cmd_explore,
    "osss-check": cmd_osss,
    "diff-ineq": cmd_diff,
    "sharpness": cmd_sharpness,
    "oracle": cmd_oracle,
    "brw-check": cmd_brw,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = ex.load_config(args.config).with_overrides(seed=args.seed, reps=args.reps, threads=args.threads)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ex.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out or cfg.out
    if out and not Path(out).is_dir():
        print(f"I/O error: output directory {out} does not exist", file=sys.stderr)
        return EXIT_IO
    try:
        outputs, ok = COMMANDS[args.command](cfg, args.format)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except oracle.OracleError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    try:
        if out:
            ex.run_manifest(cfg, outputs, out, command=args.command)
        else:
            for name, text in outputs.items():
                sys.stdout.write(f"# {name}\n{text}")
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not ok:
        print(f"{args.command}: numerical check failed or inconclusive", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
