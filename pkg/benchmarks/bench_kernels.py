#!/usr/bin/env python3
"""Benchmark: jitted kernels vs the pure-numpy fallback.

Times the tail/quantile vector kernels, per-link search profiles, and a
full network solve under both backends. The jitted path is warmed before
measurement so compilation is excluded.

Usage:
    python benchmarks/bench_kernels.py [--points N] [--links N] [--nodes N] [--reps N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fblalloc.kernels import _numpy as np_backend

try:
    from fblalloc.kernels import _numba as nb_backend
except ImportError:
    nb_backend = None

GAMMA = float(np.log(0.01))
PROFILE_ARGS = dict(bandwidth=1e5, omega=0.1, w_max=0.25, bits=100.0,
                    w_c=5e-3, gamma_ln=GAMMA, k_max=10 ** 6)


def timeit(fn, reps: int) -> float:
    best = np.inf
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_backend(backend, points: int, links: int, reps: int) -> dict:
    rng = np.random.default_rng(0)
    x = rng.uniform(-8, 8, size=points)
    p = rng.uniform(1e-9, 1 - 1e-9, size=points)
    m = rng.integers(1, 201, size=points).astype(np.float64)
    c1s = 10.0 ** rng.uniform(-12, -6, size=links)

    # warmup (jit compilation, caches)
    backend.q_array(x[:16])
    backend.inv_q_array(p[:16])
    backend.tx_power_array(m[:16], p[:16], 1e-9, 100.0)
    backend.node_profile(1, 100, 1e-9, **PROFILE_ARGS)

    out = {
        "q_array": timeit(lambda: backend.q_array(x), reps),
        "inv_q_array": timeit(lambda: backend.inv_q_array(p), reps),
        "tx_power_array": timeit(lambda: backend.tx_power_array(m, p, 1e-9, 100.0), reps),
        "node_profile": timeit(
            lambda: [backend.node_profile(1, 100, float(c), **PROFILE_ARGS)
                     for c in c1s], reps),
    }
    return out


def bench_solver(nodes: int, reps: int) -> dict:
    from fblalloc import solver
    from fblalloc.config import SystemConfig, with_nodes

    cfg = with_nodes(SystemConfig().validate(), nodes)
    rng = np.random.default_rng(1)
    gains = cfg.noise_power_w / 10.0 ** rng.uniform(-9, -7, size=nodes)
    solver.solve_network(gains, cfg)  # warmup
    return {"solve_network": timeit(lambda: solver.solve_network(gains, cfg), reps)}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=1_000_000)
    ap.add_argument("--links", type=int, default=2_000)
    ap.add_argument("--nodes", type=int, default=64)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    print(f"vector kernels on {args.points:,} points; "
          f"{args.links:,} per-link profiles; best of {args.reps}")
    numpy_times = bench_backend(np_backend, args.points, args.links, args.reps)
    numba_times = (bench_backend(nb_backend, args.points, args.links, args.reps)
                   if nb_backend is not None else None)

    print(f"\n{'kernel':<18} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}")
    print("-" * 55)
    for key, t_np in numpy_times.items():
        if numba_times is None:
            print(f"{key:<18} {t_np * 1e3:>12.2f} {'n/a':>12} {'n/a':>9}")
        else:
            t_nb = numba_times[key]
            print(f"{key:<18} {t_np * 1e3:>12.2f} {t_nb * 1e3:>12.2f} "
                  f"{t_np / t_nb:>8.1f}x")

    active = bench_solver(args.nodes, args.reps)
    print(f"\nsolve_network (n={args.nodes}, active backend): "
          f"{active['solve_network'] * 1e3:.2f} ms")
    print("set FBLALLOC_NO_NUMBA=1 and rerun to time the fallback end to end")


if __name__ == "__main__":
    main()
