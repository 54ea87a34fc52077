"""Timing comparison of the compiled kernel core against the numpy fallback.

Run:  python benchmarks/bench_kernels.py [--repeats 200]

Covers the four hot kernels (channel map forward/backward, the gated clip
forward/backward, pairwise distances, kNN selection) at small desk-scale
sizes and one larger size.  Results are wall-clock medians.
"""

import argparse
import time

import numpy as np

from vnn._kernels import backends
from vnn.autodiff import Rng


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    sizes = [("N=64 C=16", 64, 16), ("N=256 C=48", 256, 48)]
    for label, n, c in sizes:
        w = rng.normal((c, c))
        v = rng.normal((n, c, 3))
        g = rng.normal((n, c, 3))
        q = rng.normal((n, c, 3))
        k = rng.normal((n, c, 3))
        pts = rng.normal((n, 3))
        yield (f"channel_map_fwd {label}",
               lambda b, w=w, v=v: b.channel_map_fwd(w, v))
        yield (f"channel_map_bwd {label}",
               lambda b, w=w, v=v, g=g: b.channel_map_bwd(w, v, g))
        yield (f"vn_clip_fwd     {label}",
               lambda b, q=q, k=k: b.vn_clip_fwd(q, k, 1e-6, 0.2))
        yield (f"vn_clip_bwd     {label}",
               lambda b, q=q, k=k, g=g: b.vn_clip_bwd(q, k, 1e-6, 0.2, g))
        yield (f"pairwise+knn    {label}",
               lambda b, pts=pts, n=n: b.knn_select(b.pairwise_sqdist(pts),
                                                    min(8, n - 1), True))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    impls = backends()
    if len(impls) < 2:
        print("compiled backend not built; showing numpy only")
    rng = Rng(0)
    rows = []
    for name, call in cases(rng):
        timings = {bname: median_time(lambda b=b: call(b), args.repeats)
                   for bname, b in impls.items()}
        rows.append((name, timings))

    width = max(len(r[0]) for r in rows)
    header = f"{'kernel':<{width}}  " + "  ".join(f"{b:>12}" for b in impls)
    if len(impls) == 2:
        header += "  speedup"
    print(header)
    print("-" * len(header))
    for name, timings in rows:
        line = f"{name:<{width}}  " + "  ".join(
            f"{timings[b] * 1e6:>10.1f}us" for b in impls)
        if "numpy" in timings and "cython" in timings:
            line += f"  {timings['numpy'] / timings['cython']:>6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
