"""Time the compiled and numpy im2col/col2im kernels on the model's real conv shapes.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one row per (kernel, shape) with the best-of-N wall time of each
backend, the speedup, and whether both produce identical bytes.
"""

import argparse
import timeit

import numpy as np

from fsar import _pykernels

try:
    from fsar import _ckernels
except ImportError:
    _ckernels = None

# (label, B, C, H, W, k, stride, pad): one 3-way 1-shot 2-query episode at T=4
# is 36 frames
SHAPES = [
    ("backbone.conv1", 36, 3, 32, 32, 3, 1, 1),
    ("backbone.conv2", 36, 16, 32, 32, 3, 2, 1),
    ("backbone.conv3", 36, 16, 16, 16, 3, 2, 1),
    ("ipe.conv", 36, 16, 8, 8, 3, 1, 1),
    ("ipd.conv3", 36, 16, 32, 32, 3, 1, 1),
]


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<8} {'layer':<16} {'cython ms':>10} {'numpy ms':>10} {'speedup':>8}  identical")
    for label, B, C, H, W, k, s, p in SHAPES:
        x = rng.standard_normal((B, C, H, W))
        cols = _pykernels.im2col(x, k, k, s, p)
        g = rng.standard_normal(cols.shape)
        cases = [
            ("im2col", lambda m: m.im2col(x, k, k, s, p)),
            ("col2im", lambda m: m.col2im(g, B, C, H, W, k, k, s, p)),
        ]
        for name, call in cases:
            tc = best_of(lambda: call(_ckernels), args.repeat)
            tp = best_of(lambda: call(_pykernels), args.repeat)
            same = call(_ckernels).tobytes() == call(_pykernels).tobytes()
            print(f"{name:<8} {label:<16} {tc * 1e3:>10.2f} {tp * 1e3:>10.2f} {tp / tc:>7.2f}x  {same}")


if __name__ == "__main__":
    main()
