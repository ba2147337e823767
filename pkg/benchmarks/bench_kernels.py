"""Time the compiled patch kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so one process compares them regardless
of UNIPAINT_PURE_PYTHON. Outputs are checked for bit-equality before timing.
"""

import argparse
import timeit

import numpy as np

from unipaint.numerics import _pykernels

try:
    from unipaint.numerics import _ckernels
except ImportError:
    _ckernels = None

# Shapes match the desk model: 8 frames of 16x16 latents at widths 16/32.
CASES = [
    ("im2col_2d", lambda x: (x, 3, 3, 1, 1), (32, 16, 16, 16)),
    ("im2col_2d stride2", lambda x: (x, 3, 3, 2, 1), (32, 16, 16, 32)),
    ("im2col_3d", lambda x: (x, 3, 3, 3, 2, 1), (4, 8, 16, 16, 8)),
]


def _col2im_case(name, shape, rng):
    x = rng.standard_normal(shape).astype(np.float32)
    if name.startswith("im2col_2d"):
        k, stride = 3, (2 if "stride2" in name else 1)
        cols = _pykernels.im2col_2d(x, k, k, stride, 1)
        return "col2im_2d", (cols, shape, k, k, stride, 1)
    cols = _pykernels.im2col_3d(x, 3, 3, 3, 2, 1)
    return "col2im_3d", (cols, shape, 3, 3, 3, 2, 1)


def _time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    opts = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'shape':<22}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for name, make_args, shape in CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        fn = name.split()[0]
        jobs = [(fn, make_args(x)), _col2im_case(name, shape, rng)]
        for kernel, args in jobs:
            py, cy = getattr(_pykernels, kernel), getattr(_ckernels, kernel)
            if not np.array_equal(py(*args), cy(*args)):
                raise SystemExit(f"{kernel}: backends disagree")
            tp, tc = _time(py, args, opts.repeat), _time(cy, args, opts.repeat)
            print(f"{kernel:<22}{str(shape):<22}{tp * 1e3:>11.3f}{tc * 1e3:>11.3f}{tp / tc:>8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
