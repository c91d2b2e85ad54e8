#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--points 2048]

Each row reports the best of ``--repeat`` runs after one warm-up call (so
JIT compilation is excluded) and checks that both backends agree exactly.
"""

import argparse
import time

import numpy as np

from affordance3d import kernels
from affordance3d.geometry import PointCloud, camera_ring, project_points


def best_time(fn, repeat):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n):
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((n, 3))
    pts /= np.abs(pts).max()
    centers = pts[kernels.fps(pts, 64, backend="numpy")]
    view = project_points(PointCloud(pts), camera_ring(12)[0])
    yield "fps M=64", lambda b: kernels.fps(pts, 64, backend=b)
    yield "knn k=32", lambda b: kernels.knn(pts, centers, 32, backend=b)
    yield "idw k=3", lambda b: kernels.idw_weights(pts, centers, 3, backend=b)
    yield "splat 224x224", lambda b: kernels.splat(view.uv[:, 0], view.uv[:, 1], view.point_depth, 224, 224, 1.5, backend=b)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--points", type=int, default=2048)
    args = p.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}  match")
    for name, fn in cases(args.points):
        t_np, out_np = best_time(lambda: fn("numpy"), args.repeat)
        t_nb, out_nb = best_time(lambda: fn("numba"), args.repeat)
        print(f"{name:<16}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x  {same(out_np, out_nb)}")


if __name__ == "__main__":
    main()
