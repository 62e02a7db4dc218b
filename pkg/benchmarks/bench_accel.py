"""Benchmark the numba-accelerated kernels against the pure-numpy fallback.

The fallback is selected per process via the BOLTPIPE_NO_NUMBA environment
variable, so this script re-executes itself once with the flag set and
prints a side-by-side table.

Usage: python3 benchmarks/bench_accel.py [--points 200000] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def build_cloud(n, seed=0):
    from boltpipe.cloud import PointCloud

    rng = np.random.default_rng(seed)
    # a rough surface patch: realistic neighborhood sizes for the eigen kernel
    side = np.sqrt(n * 0.008**2)
    pts = np.column_stack([
        rng.uniform(0, side, n),
        rng.uniform(0, side, n),
        rng.normal(0, 0.01, n),
    ])
    return PointCloud(pts)


def bench(n_points, repeat):
    from boltpipe.accel import HAVE_NUMBA
    from boltpipe.cloud import SpatialIndex, mean_point_spacing
    from boltpipe.geomfeat import influence_radius, local_eigenvalues
    from boltpipe.geomfilter import dbscan

    cloud = build_cloud(n_points)
    index = SpatialIndex(cloud)
    r = influence_radius(mean_point_spacing(cloud))

    results = {"numba": bool(HAVE_NUMBA)}

    # warm up JIT compilation outside the timed region
    small = build_cloud(2000, seed=1)
    local_eigenvalues(small, SpatialIndex(small), r)
    dbscan(small.positions, 0.05, 10)

    best = min(
        _timed(lambda: local_eigenvalues(cloud, index, r)) for _ in range(repeat)
    )
    results["eigenvalues_s"] = best

    rng = np.random.default_rng(2)
    blob = np.vstack([
        rng.normal(0, 0.05, (n_points // 40, 3)) + off
        for off in rng.uniform(0, 3, (20, 3))
    ])
    best = min(_timed(lambda: dbscan(blob, 0.1, 50)) for _ in range(repeat))
    results["dbscan_s"] = best
    return results


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=200000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--emit-json", action="store_true",
                    help="print raw results for the parent process")
    args = ap.parse_args()

    if args.emit_json:
        print(json.dumps(bench(args.points, args.repeat)))
        return

    here = bench(args.points, args.repeat)

    env = dict(os.environ, BOLTPIPE_NO_NUMBA="1")
    out = subprocess.run(
        [sys.executable, __file__, "--points", str(args.points),
         "--repeat", str(args.repeat), "--emit-json"],
        env=env, capture_output=True, text=True, check=True,
    )
    other = json.loads(out.stdout.strip().splitlines()[-1])

    fast, slow = (here, other) if here["numba"] else (other, here)
    print(f"points: {args.points}   repeat: best of {args.repeat}")
    print(f"{'kernel':<16} {'numba':>10} {'numpy':>10} {'speedup':>9}")
    for key, label in (("eigenvalues_s", "eigenvalues"),
                       ("dbscan_s", "dbscan")):
        ratio = slow[key] / fast[key] if fast[key] > 0 else float("inf")
        print(f"{label:<16} {fast[key]:>9.3f}s {slow[key]:>9.3f}s "
              f"{ratio:>8.1f}x")


if __name__ == "__main__":
    main()
