"""Compare the compiled and numpy Riccati kernels.

    python3 benchmarks/bench_kernels.py [--steps 2000] [--repeat 5]

Times the raw RK4 sweep on random stable systems of several sizes, then a full
equilibrium solve on the builtin fixtures with each backend patched in, and
reports the largest difference between the two backends' outputs.
"""
import argparse
import time

import numpy as np

from stacklqg import _backend
from stacklqg.augment import augment
from stacklqg.integrators import TimeGrid
from stacklqg.problem import FIXTURES
from stacklqg.riccati import solve_riccati


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def random_system(size, N, rng):
    A = rng.standard_normal((N + 1, size, size)) * 0.3 - np.eye(size)
    Am = 0.5 * (A[1:] + A[:-1])
    B = np.ascontiguousarray(np.swapaxes(A, 1, 2))
    Bm = 0.5 * (B[1:] + B[:-1])
    G = rng.standard_normal((size, size)) * 0.2
    C = -(G @ G.T)[None]
    D = np.eye(size)[None]
    return A, Am, B, Bm, C, C, D, D, np.zeros((size, size))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    kernels = _backend.available_backends()
    if "cython" not in kernels:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    h = 1.0 / args.steps

    print(f"raw sweep, N={args.steps} (best of {args.repeat})")
    print(f"{'size':>6} " + " ".join(f"{k:>10}" for k in kernels) + f" {'speedup':>9} {'max diff':>10}")
    for size in (2, 4, 6, 8, 12):
        sysargs = random_system(size, args.steps, rng)
        res = {k: best_of(lambda f=f: f(*sysargs, h, True, True), args.repeat) for k, f in kernels.items()}
        row = " ".join(f"{res[k][0] * 1e3:>8.2f}ms" for k in kernels)
        if "cython" in res:
            speed = res["python"][0] / res["cython"][0]
            diff = np.abs(res["python"][1][0] - res["cython"][1][0]).max()
            row += f" {speed:>8.1f}x {diff:>10.1e}"
        print(f"{size:>6} {row}")

    print(f"\nfull equilibrium solve, N={args.steps}")
    default = _backend.riccati_rk4
    try:
        for name, build in FIXTURES.items():
            aug = augment(build())
            grid = TimeGrid(aug.spec.T, args.steps)
            res = {}
            for k, f in kernels.items():
                _backend.riccati_rk4 = f
                res[k] = best_of(lambda: solve_riccati(aug, grid), max(1, args.repeat // 2))
            row = " ".join(f"{k}={res[k][0]:.3f}s" for k in kernels)
            if "cython" in res:
                diff = np.abs(res["python"][1].P.values - res["cython"][1].P.values).max()
                row += f"  speedup {res['python'][0] / res['cython'][0]:.1f}x  max|dP| {diff:.1e}"
            print(f"  {name:<8} {row}")
    finally:
        _backend.riccati_rk4 = default


if __name__ == "__main__":
    main()
