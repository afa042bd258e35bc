"""Time the numba kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--size 128] [--repeats 5]

Prints one CSV row per kernel with the median seconds of each backend and the
speedup. The first numba call (compilation) is excluded by a warm-up run.
"""

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from dgmnet import kernels


def median_seconds(fn, args, repeats):
    fn(*args)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(size, channels, state_size, rng):
    fg = rng.uniform(size=(size, size)) < 0.7
    x = rng.uniform(-0.5, 0.5, size=(size, channels, size))
    scan = (x, rng.uniform(-1, 1, (channels, state_size)), rng.uniform(-1, 1, channels),
            rng.uniform(-1, 1, channels), rng.uniform(-1, 1, (channels, state_size)),
            rng.uniform(-1, 1, (channels, state_size)), np.ones(channels))
    src = rng.standard_normal((channels, size, size))
    grid = rng.uniform(-1, 1, size=(2, size, size))
    return [
        ("squared_edt", lambda impl: (impl["squared_edt"], (fg,))),
        ("scan_forward", lambda impl: (impl["scan_forward"], scan)),
        ("grid_sample_forward", lambda impl: (impl["grid_sample_forward"], (src, grid))),
        ("grid_sample_backward",
         lambda impl: (impl["grid_sample_backward"], (np.ones_like(src), src, grid))),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--state-size", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(("kernel", "size", "numba_seconds", "numpy_seconds", "speedup"))
    for name, pick in cases(args.size, args.channels, args.state_size, rng):
        t_numba = median_seconds(*pick(kernels.NUMBA_IMPL), args.repeats)
        t_numpy = median_seconds(*pick(kernels.NUMPY_IMPL), args.repeats)
        writer.writerow((name, args.size, f"{t_numba:.6f}", f"{t_numpy:.6f}",
                         f"{t_numpy / t_numba:.2f}"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
