"""Compiled versus pure-Python kernel timings.

Runs KNN queries, density-peak selection and tile rasterization once per
available backend on identical inputs, checks the outputs agree and prints
median wall times plus the speedup.

    python3 benchmarks/bench_backends.py [--points N] [--queries Q] [--size PX] [--runs R] [--json PATH]
"""
from __future__ import annotations

import argparse
import json
import math
import statistics
import time

import numpy as np

from npr._backend import available_backends
from npr.clouds import PointCloudB
from npr.geometry import CameraIntrinsics, Pose
from npr.kdtree import KDTree
from npr.splat import GaussianSet, rasterize
from npr.stq import SamplingConfig, density_peak_select


def median_time(fn, runs):
    times = []
    out = None
    for _ in range(runs):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--queries", type=int, default=2000)
    ap.add_argument("--gaussians", type=int, default=3000)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--runs", type=int, default=3)
    ap.add_argument("--json", help="also write the table as JSON")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 4, (args.points, 3))
    queries = rng.uniform(0, 4, (args.queries, 3))
    tree = KDTree(pts)
    cloud = PointCloudB(pts, rng.uniform(0, 1, (args.points, 3)))
    n = args.gaussians
    gs = GaussianSet(np.c_[rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(2, 6, n)],
                     rng.normal(size=(n, 4)), rng.uniform(0.02, 0.15, (n, 3)), rng.uniform(0.2, 0.95, n),
                     rng.uniform(0, 1, (n, 3)))
    intr = CameraIntrinsics.from_hfov(args.size, args.size, math.radians(90))

    tasks = {
        "knn": lambda k: tree.knn(queries, 16, 1.0, kernels=k)[0],
        "density_peak_select": lambda k: density_peak_select(cloud, SamplingConfig(), kernels=k).indices,
        "rasterize": lambda k: rasterize(gs, Pose.identity(), intr, kernels=k).pixels,
    }
    backends = available_backends()
    rows = []
    for name, task in tasks.items():
        times, outs = {}, {}
        for bname, kern in backends.items():
            times[bname], outs[bname] = median_time(lambda: task(kern), args.runs)
        ref = outs["python"]
        agree = all(np.array_equal(o, ref) or np.allclose(o, ref, atol=1e-12) for o in outs.values())
        row = {"task": name, "agree": bool(agree), **{"%s_s" % b: t for b, t in times.items()}}
        if "cython" in times:
            row["speedup"] = times["python"] / times["cython"]
        rows.append(row)
        cols = "  ".join("%s %.4fs" % (b, t) for b, t in times.items())
        sp = "  speedup %.1fx" % row["speedup"] if "speedup" in row else ""
        print("%-20s %s%s  outputs %s" % (name, cols, sp, "agree" if agree else "DIFFER"))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0 if all(r["agree"] for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
