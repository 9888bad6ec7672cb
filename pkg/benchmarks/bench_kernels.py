"""Compiled vs numpy kernels on desk-scale inputs.

    python benchmarks/bench_kernels.py [--n 190000] [--repeat 5]

Prints the best-of-``repeat`` wall time per kernel and backend and checks
that both backends return the same result.
"""
import argparse
import time

import numpy as np

from ballotforensics import _pykernels

try:
    from ballotforensics import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n, rng):
    x = rng.beta(8, 2, n)
    y = rng.beta(5, 5, n)
    data = np.sort(rng.normal(0.05, 0.03, n))
    grid = np.linspace(data[0], data[-1], 512)
    codes = rng.integers(0, n // 7, n).astype(np.int64)
    return {
        "hist2d (100 bins)": lambda k: k.hist2d(x, y, 0.0, 1.0, 100),
        "bin_index2d (100 bins)": lambda k: k.bin_index2d(x, y, 0.0, 1.0, 100),
        "kde_grid (512 points)": lambda k: k.kde_grid(data, grid, 0.003),
        "group_means": lambda k: k.group_means(codes, x, n // 7),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(p, q) for p, q in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-12, equal_nan=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=190_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; only the numpy backend is timed")
    rng = np.random.default_rng(args.seed)
    print(f"n = {args.n}, best of {args.repeat}")
    print(f"{'kernel':<26}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}  agree")
    for name, fn in cases(args.n, rng).items():
        tp, outp = best_of(lambda: fn(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<26}{1e3 * tp:>12.2f}")
            continue
        tc, outc = best_of(lambda: fn(_ckernels), args.repeat)
        print(f"{name:<26}{1e3 * tp:>12.2f}{1e3 * tc:>13.2f}{tp / tc:>8.1f}x  {same(outp, outc)}")


if __name__ == "__main__":
    main()
