"""Splat-versus-volume frame-time benchmark on a fixed synthetic scene."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from npr import _backend
from npr.clouds import FeatureCloudM
from npr.geometry import CameraIntrinsics, Pose
from npr.nets import NetBundle, default_bundle, point_descriptor
from npr.pipeline import ingest
from npr.scene import SceneSpec, synth_scene
from npr.splat import GaussianSet, SplatConfig, make_gaussians, rasterize
from npr.stq import SamplingConfig, SelectedPoints
from npr.volume import feature_field, render_feature_view


def time_runs(fn: Callable[[], object], warmup: int, runs: int) -> List[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


@dataclass
class BenchScene:
    gaussians: GaussianSet
    features: FeatureCloudM
    pose: Pose
    intr: CameraIntrinsics
    nets: NetBundle


def build_bench_scene(points: int = 100_000, width: int = 224, height: int = 224, seed: int = 0,
                      nets: Optional[NetBundle] = None) -> BenchScene:
    """A furnished room whose point cloud is thinned to exactly ``points`` splats.

    Observations are ray-cast at the smallest square resolution that yields
    enough pixels; the cloud is then subsampled at evenly spaced indices.
    """
    nets = nets or default_bundle(seed)
    n_steps = 5
    res = max(16, int(math.ceil(math.sqrt(points / (12 * n_steps)))))
    spec = SceneSpec.random(seed, n_steps=n_steps, image_size=(res, res),
                            feature_dim=nets.feature_dim)
    scene = synth_scene(spec)
    cloud, feats = ingest(scene.steps, spec.intrinsics)
    n = len(cloud)
    pick = np.linspace(0, n - 1, min(points, n)).round().astype(np.int64)
    sel = SelectedPoints(cloud.positions[pick].astype(np.float64), cloud.colors[pick].astype(np.float64), pick)
    desc = point_descriptor(sel.positions, sel.colors, nets.descriptor)
    g_img, _ = make_gaussians(sel, desc, nets.heads)
    intr = CameraIntrinsics.from_hfov(width, height, math.radians(spec.hfov_deg))
    pose = Pose.from_yaw(spec.start_yaw + math.radians(15.0), spec.trajectory[len(spec.trajectory) // 2])
    return BenchScene(g_img, feats, pose, intr, nets)


def run_bench(scene: Optional[BenchScene] = None, warmup: int = 3, runs: int = 10,
              volume_warmup: Optional[int] = None, volume_runs: Optional[int] = None,
              threads: int = 1, sampling: Optional[SamplingConfig] = None,
              splat: Optional[SplatConfig] = None, **scene_kw) -> dict:
    """Median per-frame times of the two branches at one output resolution."""
    scene = scene or build_bench_scene(**scene_kw)
    sampling = sampling or SamplingConfig()
    splat = splat or SplatConfig()
    field = feature_field(scene.features, scene.nets, sampling, threads)

    def splat_frame():
        return rasterize(scene.gaussians, scene.pose, scene.intr, cfg=splat, threads=threads)

    def volume_frame():
        return render_feature_view(scene.pose, scene.intr, field, sampling)

    t_splat = time_runs(splat_frame, warmup, runs)
    vw = warmup if volume_warmup is None else volume_warmup
    vr = runs if volume_runs is None else volume_runs
    t_vol = time_runs(volume_frame, vw, vr)
    ms, mv = statistics.median(t_splat), statistics.median(t_vol)
    return {
        "backend": _backend.BACKEND,
        "threads": threads,
        "width": scene.intr.width,
        "height": scene.intr.height,
        "primitives": len(scene.gaussians),
        "feature_points": len(scene.features),
        "samples_per_ray": sampling.samples_per_ray,
        "samples": scene.intr.width * scene.intr.height * sampling.samples_per_ray,
        "splat": {"warmup": warmup, "runs": runs, "times": t_splat, "median": ms},
        "volume": {"warmup": vw, "runs": vr, "times": t_vol, "median": mv},
        "ratio": mv / ms if ms > 0 else math.inf,
    }
