"""Compare the compiled and pure-Python watershed kernels.

    python benchmarks/bench_watershed.py --sizes 64 128 256 --markers 20
"""
import argparse
import time

import numpy as np

from weakcanopy import _core
from weakcanopy.objectness import watershed_raw


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--markers", type=int, default=20)
    ap.add_argument("--connectivity", type=int, choices=(4, 8), default=4)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print(f"compiled backend available: {_core.BACKEND == 'cython'}")
    print(f"{'size':>6} {'python s':>10} {'compiled s':>11} {'speedup':>8}  identical")
    for n in args.sizes:
        img = rng.random((n, n, 3))
        markers = rng.integers(0, n, size=(args.markers, 2))
        t_py, (d_py, r_py) = _time(lambda: watershed_raw(img, markers, connectivity=args.connectivity,
                                                         backend="python"), args.repeat)
        if _core.BACKEND == "cython":
            t_c, (d_c, r_c) = _time(lambda: watershed_raw(img, markers, connectivity=args.connectivity),
                                    args.repeat)
            same = np.array_equal(d_py, d_c) and np.array_equal(r_py, r_c)
            print(f"{n:>6} {t_py:>10.4f} {t_c:>11.4f} {t_py / t_c:>7.1f}x  {same}")
        else:
            print(f"{n:>6} {t_py:>10.4f} {'-':>11} {'-':>8}  -")


if __name__ == "__main__":
    main()
