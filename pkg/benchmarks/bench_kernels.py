"""Time the numba and numpy variants of each kernel on case33bw-sized and larger inputs.

Run with ``python benchmarks/bench_kernels.py [--repeat N] [--scale K]``.  The
numba timings exclude JIT compilation (one warm-up call per kernel).  For
context the script also times one restoration solve, which dominates an
end-to-end run.
"""
import argparse
import time

import numpy as np

from mgdp import kernels


def _inputs(scale, seed=0):
    rng = np.random.default_rng(seed)
    n_bus, T = 33 * scale, 6
    n_br = n_bus - 1
    br_from = rng.integers(0, n_bus, n_br)
    br_to = np.arange(1, n_bus)
    r, x = rng.random(n_br) * 0.01, rng.random(n_br) * 0.01
    p, q = rng.normal(size=(n_bus, T)), rng.normal(size=(n_bus, T))
    P, Q, l = rng.normal(size=(n_br, T)), rng.normal(size=(n_br, T)), rng.random((n_br, T))
    v = 1 + 0.1 * rng.random((n_bus, T))
    n_cones = n_br * T
    xs = rng.normal(size=4 * n_cones)
    ptr = np.arange(0, 2 * n_cones + 1, 2)
    idx = np.arange(2 * n_cones)
    u = np.arange(2 * n_cones, 3 * n_cones)
    w = np.arange(3 * n_cones, 4 * n_cones)
    unif = rng.random(200_000 * scale)
    return {
        "laplace_from_uniform": (unif, 1.5),
        "soc_violation": (xs, u, ptr, idx),
        "rotated_violation": (xs, u, w, np.full(n_cones, 1.0), ptr, idx),
        "distflow_residuals": (br_from, br_to, r, x, p, q, P, Q, l, v),
        "relaxation_gap": (v[br_from], l, P, Q),
    }


def _best(fn, args, repeat):
    fn(*args)  # warm-up / compile
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def _solve_time():
    from mgdp.experiment import ExperimentConfig, prepare
    from mgdp.lr import solve_lr

    setup = prepare(ExperimentConfig.load("case33_config"))
    t = time.perf_counter()
    solve_lr(setup.ctx, setup.d)
    return time.perf_counter() - t


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--scale", type=int, nargs="*", default=[1, 30])
    ap.add_argument("--no-solve", action="store_true")
    args = ap.parse_args(argv)

    if not kernels.NUMBA_KERNELS:
        print("numba unavailable; only numpy timings are shown")
    print(f"{'kernel':<22}{'scale':>6}{'numpy ms':>12}{'numba ms':>12}{'speedup':>9}")
    for scale in args.scale:
        for name, call in _inputs(scale).items():
            a = _best(kernels.NUMPY_KERNELS[name], call, args.repeat)
            nb = kernels.NUMBA_KERNELS.get(name)
            b = _best(nb, call, args.repeat) if nb else float("nan")
            print(f"{name:<22}{scale:>6}{a * 1e3:>12.3f}{b * 1e3:>12.3f}{a / b:>9.1f}")
    if not args.no_solve:
        print(f"\none case33bw restoration solve (T=6): {_solve_time() * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
