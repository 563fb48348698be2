"""Numba kernels vs the pure Python fallback on the hot paths.

Each backend runs in its own interpreter (the switch is read at import):

    python benchmarks/bench_kernels.py --reps 200

Numba timings exclude compilation (one warm-up call first).  The script
also checks that both backends return identical numbers.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def workloads(reps: int) -> dict:
    import numpy as np

    from ipsharp import explore, experiments, influence, pivotal
    from ipsharp.graphical import make_rng, sample_timeline
    from ipsharp.lattice import Box
    from ipsharp.rates import constants, contact

    spec = contact(1.0)
    M = constants(spec).M

    def grid():
        g = experiments.simulate_grid(spec, 4, [0.0, 0.1, 0.5], [0.5, 1.0, 2.0], reps, seed=1)
        return g.hits.tolist()

    def russo():
        return pivotal.russo_derivative_mc(spec, 2, 1.0, 0.2, reps, seed=2).mean

    def expl():
        return explore.run_explorations(spec, 2, 1.0, 0.2, reps, seed=3).full.tolist()

    def cone():
        box = Box(8, spec.d)
        sizes = []
        for r in range(reps):
            tl = sample_timeline(box, 2.0, M, make_rng(4, r))
            c, _ = influence.backward_cone(tl, 2.0, spec.R, clip=True, lazy=False)
            sizes.append(c.size_at(0.0))
        return sizes

    out = {}
    for name, fn in (("theta_grid", grid), ("russo", russo), ("explore", expl), ("backward_cone", cone)):
        fn()
        t0 = time.perf_counter()
        value = fn()
        out[name] = {"seconds": time.perf_counter() - t0, "value": value}
    return out


def run_backend(disable: bool, reps: int) -> dict:
    env = dict(os.environ, IPSHARP_DISABLE_NUMBA="1" if disable else "0")
    cmd = [sys.executable, __file__, "--worker", "--reps", str(reps)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args(argv)
    if args.worker:
        from ipsharp._jit import backend

        print(json.dumps({"backend": backend(), "results": workloads(args.reps)}))
        return 0
    fast = run_backend(False, args.reps)
    slow = run_backend(True, args.reps)
    print(f"{'workload':<15}{fast['backend']:>10}{slow['backend']:>10}{'speedup':>10}  same")
    same_all = True
    for name, f in fast["results"].items():
        s = slow["results"][name]
        same = f["value"] == s["value"]
        same_all &= same
        print(f"{name:<15}{f['seconds']:>9.3f}s{s['seconds']:>9.3f}s{s['seconds'] / f['seconds']:>9.1f}x  {same}")
    return 0 if same_all else 1


if __name__ == "__main__":
    sys.exit(main())
