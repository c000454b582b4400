"""Time the numba and numpy backends of the segment-mean kernels.

Run with ``python benchmarks/bench_kernels.py [--rows N] [--width D] [--repeat R]``.
Graph sizes default to roughly LastFM scale (items x entities).
"""
import argparse
import time

import numpy as np

from factorrec import kernels


def random_csr(n_rows, n_cols, mean_degree, rng):
    deg = rng.poisson(mean_degree, size=n_rows)
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(deg, out=indptr[1:])
    indices = rng.integers(0, n_cols, size=int(indptr[-1])).astype(np.int64)
    return indptr, indices


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=9000)
    ap.add_argument("--cols", type=int, default=60000)
    ap.add_argument("--degree", type=float, default=8.0)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    indptr, indices = random_csr(args.rows, args.cols, args.degree, rng)
    values = rng.normal(size=(args.cols, args.width)).astype(np.float32)
    grad = rng.normal(size=(args.rows, args.width)).astype(np.float32)

    print(f"rows={args.rows} cols={args.cols} nnz={len(indices)} width={args.width}")
    if not kernels.HAS_NUMBA:
        print("numba unavailable (or FACTORREC_DISABLE_NUMBA set): numpy timings only")
    backends = [False, True] if kernels.HAS_NUMBA else [False]
    results = {}
    for use in backends:
        name = "numba" if use else "numpy"
        # warm up (includes jit compilation for numba)
        fwd = kernels.segment_mean(indptr, indices, values, use_numba=use)
        bwd = kernels.segment_mean_transpose(indptr, indices, grad, args.cols, use_numba=use)
        results[name] = (fwd, bwd)
        tf = best_of(lambda: kernels.segment_mean(indptr, indices, values, use_numba=use), args.repeat)
        tb = best_of(lambda: kernels.segment_mean_transpose(indptr, indices, grad, args.cols, use_numba=use),
                     args.repeat)
        print(f"{name:6s} segment_mean {tf * 1e3:8.2f} ms   transpose {tb * 1e3:8.2f} ms")
    if len(results) == 2:
        for a, b in zip(results["numpy"], results["numba"]):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)
        print("backends agree")


if __name__ == "__main__":
    main()
