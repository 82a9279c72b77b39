"""Time the numba and numpy backends of the hot kernels on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from atomreload import kernels
from atomreload._jit import HAVE_NUMBA
from atomreload.prep import TrapModel


def row_inputs(rng, n_cols=120, n_tgt=45, fill=0.5):
    src = np.flatnonzero(rng.random(n_cols) < fill)
    start = (n_cols - (2 * n_tgt - 1)) // 2
    tgt = start + 2 * np.arange(n_tgt)
    return src, tgt


def flight_inputs(rng, n=20000):
    pos = rng.normal(0, 1e-7, (n, 3))
    vel = rng.normal(0, 0.03, (n, 3))
    return pos, vel


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(7)
    rows = [row_inputs(rng) for _ in range(12)]
    pos, vel = flight_inputs(rng)
    trap = TrapModel()
    g = np.array([0.0, 0.0, -9.81])

    def plan(backend):
        for s, t in rows:
            kernels.match_row(s, t, backend=backend)

    def flight(backend):
        kernels.recapture_mask(pos, vel, 30e-6, g, trap.mass, trap.depth_j, trap.waist, trap.rayleigh,
                               backend=backend)

    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    for b in backends:  # warm up, including jit compilation
        plan(b)
        flight(b)

    print(f"{'kernel':<24}{'backend':<10}{'best ms':>10}")
    for name, fn in (("match_row x12 rows", plan), ("recapture 20k atoms", flight)):
        for b in backends:
            best = min(timeit.repeat(lambda: fn(b), number=10, repeat=args.repeat)) / 10
            print(f"{name:<24}{b:<10}{best * 1e3:>10.3f}")
    if not HAVE_NUMBA:
        print("numba not installed; only the numpy backend was timed")


if __name__ == "__main__":
    main()
