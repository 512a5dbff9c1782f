"""Compare the compiled and pure-Python conv kernels, and branched vs fused blocks.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import statistics
import time

import numpy as np

from dbbrep import _backend
from dbbrep.blocks import BlockSpec, build_dbb
from dbbrep.harness import bench_block
from dbbrep.ops import conv2d
from dbbrep.tensor import ConvParams

CASES = [
    # (N, C, D, H, K, stride, groups)
    (1, 64, 64, 56, 3, 1, 1),
    (1, 64, 128, 56, 3, 2, 1),
    (1, 64, 64, 56, 3, 1, 64),
    (4, 16, 32, 32, 5, 1, 2),
]


def median_time(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    print(f"default backend: {_backend.BACKEND}; available: {sorted(_backend.KERNELS)}")
    print(f"{'case':<34}" + "".join(f"{b + ' ms':>14}" for b in sorted(_backend.KERNELS)))
    for n, c, d, h, k, s, g in CASES:
        x = rng.normal(size=(n, c, h, h))
        p = ConvParams(rng.normal(size=(d, c // g, k, k)), rng.normal(size=d), s, k // 2, g)
        row = f"{f'N{n} C{c} D{d} {h}x{h} K{k} s{s} g{g}':<34}"
        outs = {}
        for name in sorted(_backend.KERNELS):
            t = median_time(lambda: conv2d(x, p, backend=name), args.repeats)
            outs[name] = conv2d(x, p, backend=name)
            row += f"{t * 1e3:>14.2f}"
        if len(outs) == 2:
            row += f"   max|diff|={np.abs(outs['compiled'] - outs['python']).max():.1e}"
        print(row)

    print()
    print("branched DBB vs fused conv (default backend)")
    for c, h, stride in ((64, 56, 1), (128, 28, 1), (64, 56, 2)):
        block = build_dbb(BlockSpec.dbb(c, c, 3, stride), seed=0)
        res = bench_block(block, (1, c, h, h), repeats=args.repeats)
        print(f"C=D={c} {h}x{h} s{stride}: branched {res.branched_time * 1e3:.2f} ms, "
              f"fused {res.fused_time * 1e3:.2f} ms, speedup {res.ratio:.2f}x")


if __name__ == "__main__":
    main()
