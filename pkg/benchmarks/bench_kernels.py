"""Compiled vs pure-Python kernels: im2col, col2im and the switch update.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the median time of each backend and the
speedup. Requires the compiled extension to be built (pip install -e .).
"""

import argparse
import timeit

import numpy as np

from alrao import _pykernels

try:
    from alrao import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x1 = rng.normal(size=(32, 1, 14, 14))
    x2 = rng.normal(size=(32, 8, 10, 10))
    cols1 = rng.normal(size=(32 * 10 * 10, 25))
    cols2 = rng.normal(size=(32 * 6 * 6, 200))
    la, lb = np.log(np.full(10, 0.0999)), np.log(np.full(10, 1e-4))
    ll = rng.normal(size=10) - 2
    return [
        ("im2col 32x1x14x14 k5", "im2col", (x1, 5, 5)),
        ("im2col 32x8x10x10 k5", "im2col", (x2, 5, 5)),
        ("col2im 32x1x14x14 k5", "col2im", (cols1, x1.shape, 5, 5)),
        ("col2im 32x8x10x10 k5", "col2im", (cols2, x2.shape, 5, 5)),
        ("switch_step n=10", "switch_step", (la, lb, ll, 5, 0.999)),
    ]


def median_time(fn, args, repeat):
    number = 50
    return float(np.median(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat))) / number


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run pip install -e . first")
    print(f"{'kernel':26s} {'python (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for label, name, a in cases(np.random.default_rng(0)):
        py = median_time(getattr(_pykernels, name), a, args.repeat)
        cy = median_time(getattr(_ckernels, name), a, args.repeat)
        print(f"{label:26s} {py * 1e6:12.1f} {cy * 1e6:12.1f} {py / cy:8.2f}")


if __name__ == "__main__":
    main()
