"""Times the compiled engine against the pure-Python twin.

    python3 benchmarks/bench_kernels.py [--requests N] [--repeat R]
"""
import argparse
import time

import numpy as np

from sdlatency import kernels

COSTS = np.array([0.002, 0.0001, 0.01, 0.0005, 0.001, 0.00005])


def cases(n):
    arrivals = np.arange(n, dtype=np.float64) / 30.0
    none = np.zeros(2)
    return {
        "simulate dense": lambda k: k.simulate(arrivals.copy(), False, 128, 0, 0.0, COSTS, none,
                                               0, 0, 0, 1),
        "simulate sd a=0.8 k=4": lambda k: k.simulate(arrivals.copy(), False, 128, 4, 0.8, COSTS,
                                                      none, 0, 0, 0, 1),
        "simulate moe 8/64": lambda k: k.simulate(arrivals.copy(), False, 128, 0, 0.0, COSTS,
                                                  np.array([0.01, 0.0005]), 8, 64, 0, 1),
        "accept_counts 1e5": lambda k: k.accept_counts(100_000, 0.7, 5, 1),
        "coverage t=32 1e4": lambda k: k.coverage_samples(10_000, 8, 64, 32, 1),
    }


def best_of(fn, kern, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(kern)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--requests", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    avail = kernels.available()
    if "compiled" not in avail:
        print("compiled kernel not built; run `pip install -e . --no-build-isolation`")
    names = list(avail)
    print(f"{'case':<24}" + "".join(f"{n:>12}" for n in names) + f"{'speedup':>10}")
    for label, fn in cases(args.requests).items():
        t = {n: best_of(fn, avail[n], args.repeat) for n in names}
        ratio = f"{t['python'] / t['compiled']:>9.1f}x" if "compiled" in t else ""
        print(f"{label:<24}" + "".join(f"{t[n]:>11.4f}s" for n in names) + ratio)


if __name__ == "__main__":
    main()
