"""Volume rendering of the feature field along camera rays."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from npr.clouds import N_VIEWS, VIEW_SEPARATION, FeatureCloudM
from npr.errors import WrongViewCount
from npr.geometry import CameraIntrinsics, Pose, Ray, camera_rays
from npr.nets import NetBundle
from npr.stq import FeatureField, SamplingConfig, sample_depths

DEFAULT_GRID = (14, 14)
DEFAULT_HFOV = math.radians(90.0)


def composite(sigma, radiance, delta):
    """Piecewise-constant quadrature along each ray.

    ``sigma`` is (R, S), ``radiance`` (R, S, D), ``delta`` (S,). Returns the
    composited (R, D) values, the sample weights (R, S) and the final
    transmittance (R,).
    """
    sigma = np.asarray(sigma, np.float64)
    tau = sigma * np.asarray(delta, np.float64)
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros(acc.shape[:-1] + (1,)), acc[..., :-1]], axis=-1))
    w = trans * -np.expm1(-tau)
    out = np.einsum("...s,...sd->...d", w, np.asarray(radiance, np.float64))
    return out, w, np.exp(-acc[..., -1])


class AnalyticField:
    """A field given by a function of position: ``fn(points) -> (radiance (n, D), sigma (n,))``."""

    def __init__(self, fn, dim: int, cfg: Optional[SamplingConfig] = None):
        self.fn = fn
        self.dim = dim
        self.cfg = cfg or SamplingConfig()

    @classmethod
    def uniform(cls, sigma: float, radiance, cfg: Optional[SamplingConfig] = None) -> "AnalyticField":
        r = np.asarray(radiance, np.float64).reshape(-1)
        return cls(lambda p: (np.broadcast_to(r, (len(p), len(r))), np.full(len(p), float(sigma))), len(r), cfg)

    def query(self, points, ray_yaw=0.0):
        p = np.asarray(points, np.float64).reshape(-1, 3)
        rad, sigma = self.fn(p)
        return np.asarray(rad, np.float64), np.asarray(sigma, np.float64), np.ones(len(p), np.int64)


def ray_yaw(directions) -> np.ndarray:
    d = np.asarray(directions, np.float64)
    return np.arctan2(d[..., 0], d[..., 2])


@dataclass
class RayResult:
    value: np.ndarray  # (D,)
    weights: np.ndarray  # (S,)
    t_final: float


def render_feature_ray(ray: Ray, field, cfg: Optional[SamplingConfig] = None, full: bool = False):
    """Composite the field's radiance along one ray.

    ``field`` is anything with ``query(points, ray_yaw) -> (radiance, sigma,
    count)``, normally a :class:`~npr.stq.FeatureField`.
    """
    cfg = cfg or getattr(field, "cfg", None) or SamplingConfig()
    t, delta = sample_depths(cfg)
    o, d = np.asarray(ray.origin, np.float64), np.asarray(ray.direction, np.float64)
    rad, sigma, _ = field.query(o + t[:, None] * d, float(ray_yaw(d)))
    value, w, tf = composite(sigma[None], rad[None], delta)
    if full:
        return RayResult(value[0], w[0], float(tf[0]))
    return value[0]


def _render_rays(origins, directions, field, cfg: SamplingConfig, rays_per_chunk: int = 64):
    o = np.asarray(origins, np.float64).reshape(-1, 3)
    d = np.asarray(directions, np.float64).reshape(-1, 3)
    t, delta = sample_depths(cfg)
    n, s = len(d), len(t)
    out = np.zeros((n, field.dim))
    wsum = np.zeros(n)
    for lo in range(0, n, rays_per_chunk):
        oc, dc = o[lo: lo + rays_per_chunk], d[lo: lo + rays_per_chunk]
        pts = oc[:, None, :] + t[None, :, None] * dc[:, None, :]
        yaw = np.repeat(ray_yaw(dc), s)
        rad, sigma, _ = field.query(pts.reshape(-1, 3), yaw)
        value, w, _ = composite(sigma.reshape(-1, s), rad.reshape(-1, s, field.dim), delta)
        out[lo: lo + len(dc)] = value
        wsum[lo: lo + len(dc)] = w.sum(axis=1)
    return out, wsum


def render_feature_view(pose: Pose, intr: CameraIntrinsics, field, cfg: Optional[SamplingConfig] = None,
                        return_weights: bool = False):
    """One ray per grid-cell center; returns an (H', W', D) map (and the per-ray weight sums)."""
    cfg = cfg or getattr(field, "cfg", None) or SamplingConfig()
    rays = camera_rays(intr, pose)
    out, wsum = _render_rays(rays.origins, rays.directions, field, cfg)
    fmap = out.reshape(intr.height, intr.width, -1)
    if return_weights:
        return fmap, wsum.reshape(intr.height, intr.width)
    return fmap


@dataclass
class FeaturePanorama:
    maps: np.ndarray  # (12, H', W', D)
    yaws: np.ndarray  # (12,) radians

    def __post_init__(self):
        if len(self.maps) != N_VIEWS or len(self.yaws) != N_VIEWS:
            raise WrongViewCount("a panorama has exactly %d views" % N_VIEWS)

    def __getitem__(self, k) -> np.ndarray:
        return self.maps[k]


def panorama_intrinsics(grid: Tuple[int, int] = DEFAULT_GRID, hfov: float = DEFAULT_HFOV) -> CameraIntrinsics:
    return CameraIntrinsics.from_hfov(grid[1], grid[0], hfov)


def render_panorama(position, field, cfg: Optional[SamplingConfig] = None,
                    intr: Optional[CameraIntrinsics] = None, start_yaw: float = 0.0) -> FeaturePanorama:
    """Twelve views 30 degrees apart around ``position``."""
    intr = intr or panorama_intrinsics()
    yaws = start_yaw + VIEW_SEPARATION * np.arange(N_VIEWS)
    maps = np.stack([render_feature_view(Pose.from_yaw(y, position), intr, field, cfg) for y in yaws])
    return FeaturePanorama(maps, yaws)


def feature_field(cloud: FeatureCloudM, nets: NetBundle, cfg: Optional[SamplingConfig] = None,
                  threads: int = 1) -> FeatureField:
    return FeatureField(cloud, nets, cfg, threads)
