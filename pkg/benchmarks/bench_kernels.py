"""Time the numba and numpy backends of the alignment and DTW kernels.

    python benchmarks/bench_kernels.py --repeats 20
"""

import argparse
import time

import numpy as np

from wordmine import kernels


def timeit(fn, repeats):
    fn()  # warm-up (triggers JIT compilation)
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    print(f"{'kernel':<22}{'size':>12}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for n, m in [(8, 40), (20, 200), (60, 1000)]:
        q = rng.integers(0, 50, n)
        t = rng.integers(0, 50, m)
        a = timeit(lambda: kernels.nw_fill_jit(q, t, 1.0, -1.0, -1.0), args.repeats)
        b = timeit(lambda: kernels.nw_fill_numpy(q, t, 1.0, -1.0, -1.0), args.repeats)
        print(f"{'nw_fill':<22}{f'{n}x{m}':>12}{a * 1e3:>12.3f}{b * 1e3:>12.3f}{b / a:>10.1f}")
    for n, m in [(16, 50), (40, 200), (100, 800)]:
        cost = rng.random((n, m))
        for name, jit, npy in [
            ("dtw_fill", kernels.dtw_fill_jit, kernels.dtw_fill_numpy),
            ("subseq_dtw_fill", kernels.subseq_dtw_fill_jit, kernels.subseq_dtw_fill_numpy),
        ]:
            a = timeit(lambda: jit(cost), args.repeats)
            b = timeit(lambda: npy(cost), args.repeats)
            print(f"{name:<22}{f'{n}x{m}':>12}{a * 1e3:>12.3f}{b * 1e3:>12.3f}{b / a:>10.1f}")


if __name__ == "__main__":
    main()
