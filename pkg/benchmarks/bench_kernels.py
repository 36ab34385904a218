"""Compare the compiled and pure-Python kernels.

    python3 benchmarks/bench_kernels.py [--problems 20000] [--steps 100000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from parn import _kernels
from parn.clock_motion import C, REFERENCE_CLOCK_NOISE, ClockState, clock_trajectory
from parn.las_solver import batch_initial_theta, batch_rows

SQUARE = np.array([[100.0, 0.0], [200.0, 100.0], [100.0, 200.0], [0.0, 100.0]])


def solver_problems(n, rng):
    p = rng.uniform(60, 140, (n, 2))
    cb = rng.uniform(-300, 300, n)
    d = np.linalg.norm(SQUARE[None] - p[:, None], axis=2)
    rho = (d - cb[:, None] + 0.05 * rng.standard_normal((n, 4))) / C
    tau = (np.linalg.norm(SQUARE[0] - p, axis=1) + cb + 0.05 * rng.standard_normal(n)) / C
    rows = batch_rows(SQUARE, rho, np.zeros((n, 3)), np.full((n, 3), 1e-22), np.full(4, 0.05 / C), 1,
                      tau_u=tau, sigma_u=0.05 / C, known_velocity=np.zeros((n, 2)), known_drift=np.zeros(n),
                      delay=0.005)
    return (*rows, batch_initial_theta(SQUARE, rho), 10, 1e-6)


def filter_inputs(n, rng):
    t = np.arange(n) * 0.01
    b = clock_trajectory(ClockState(1e-6, 2e-6), t, REFERENCE_CLOCK_NOISE, rng)[:, 0]
    z = b + 0.05 / C * rng.standard_normal(n)
    x0 = np.array([z[0], 0.0])
    p0 = np.diag([(0.05 / C) ** 2, 2 * (0.05 / C) ** 2 / 1e-4])
    return (z[1:], np.ones(n - 1, dtype=np.uint8), t[1:], t[1:] + 0.005, x0, p0, 0.0,
            REFERENCE_CLOCK_NOISE.s_b, REFERENCE_CLOCK_NOISE.s_omega, (0.05 / C) ** 2)


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--problems", type=int, default=20_000)
    ap.add_argument("--steps", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = {
        "gauss_newton_batch": ("problems", solver_problems(args.problems, rng)),
        "kalman_track": ("steps", filter_inputs(args.steps, rng)),
    }
    backends = sorted(_kernels.BACKENDS)
    print(f"active backend: {_kernels.BACKEND}; available: {', '.join(backends)}")
    print(f"{'kernel':<20} {'backend':<8} {'seconds':>9} {'per item (us)':>14} {'speedup':>8}")
    for name, (unit, inputs) in cases.items():
        n = args.problems if unit == "problems" else args.steps
        base = None
        for b in ("python", "cython"):
            if b not in _kernels.BACKENDS:
                continue
            sec = best_of(getattr(_kernels.get_backend(b), name), inputs, args.repeat)
            base = sec if base is None else base
            print(f"{name:<20} {b:<8} {sec:9.4f} {1e6 * sec / n:14.3f} {base / sec:7.1f}x")


if __name__ == "__main__":
    main()
