"""Analytic synthetic rooms for end-to-end tests and benchmarks.

A scene is an axis-aligned room (walls, floor, ceiling) with boxes and
spheres inside it. Every view is ray-cast exactly, so the RGB-D images double
as ground truth for rendered views. World axes follow the camera convention:
+y points down, the camera sits at y = 0 and the floor at ``+floor_depth``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from npr.clouds import N_VIEWS, VIEW_SEPARATION, StepObservation, random_projection_features
from npr.errors import InvalidSpec
from npr.geometry import CameraIntrinsics, Pose, camera_rays

LIGHT = np.array([0.3, -0.8, 0.5]) / np.linalg.norm([0.3, -0.8, 0.5])
AMBIENT = 0.45


@dataclass
class Box:
    lo: Sequence[float]
    hi: Sequence[float]
    albedo: Sequence[float]


@dataclass
class Sphere:
    center: Sequence[float]
    radius: float
    albedo: Sequence[float]


@dataclass
class SceneSpec:
    room: Sequence[float] = (8.0, 3.0, 8.0)  # x extent, height, z extent (m)
    floor_depth: float = 1.5  # floor below the camera (m)
    boxes: List[Box] = field(default_factory=list)
    spheres: List[Sphere] = field(default_factory=list)
    trajectory: List[Sequence[float]] = field(default_factory=lambda: [[0.0, 0.0, 0.0]])
    start_yaw: float = 0.0
    image_size: Sequence[int] = (224, 224)  # (height, width)
    grid_size: Sequence[int] = (14, 14)
    hfov_deg: float = 90.0
    feature_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        self.boxes = [b if isinstance(b, Box) else Box(**b) for b in self.boxes]
        self.spheres = [s if isinstance(s, Sphere) else Sphere(**s) for s in self.spheres]
        self.validate()

    def validate(self):
        rx, ry, rz = (float(v) for v in self.room)
        if min(rx, ry, rz) <= 0:
            raise InvalidSpec("room dimensions must be positive")
        if not 0 < self.floor_depth < ry:
            raise InvalidSpec("floor_depth must lie inside the room height")
        lo, hi = self.bounds
        for b in self.boxes:
            if np.any(np.asarray(b.lo) >= np.asarray(b.hi)):
                raise InvalidSpec("box lo must be below hi on every axis")
            if np.any(np.asarray(b.lo) < lo) or np.any(np.asarray(b.hi) > hi):
                raise InvalidSpec("box outside the room")
        for s in self.spheres:
            c = np.asarray(s.center, float)
            if s.radius <= 0 or np.any(c - s.radius < lo) or np.any(c + s.radius > hi):
                raise InvalidSpec("sphere outside the room or with non-positive radius")
        for p in self.trajectory:
            if np.any(np.asarray(p) <= lo) or np.any(np.asarray(p) >= hi):
                raise InvalidSpec("trajectory point outside the room")
        for v in list(self.image_size) + list(self.grid_size):
            if int(v) < 1:
                raise InvalidSpec("image and grid sizes must be positive")
        if self.grid_size[0] > self.image_size[0] or self.grid_size[1] > self.image_size[1]:
            raise InvalidSpec("feature grid finer than the image")
        if not 0 < self.hfov_deg < 180:
            raise InvalidSpec("hfov must be in (0, 180) degrees")

    @property
    def bounds(self):
        rx, ry, rz = (float(v) for v in self.room)
        lo = np.array([-rx / 2, self.floor_depth - ry, -rz / 2])
        hi = np.array([rx / 2, self.floor_depth, rz / 2])
        return lo, hi

    @property
    def intrinsics(self) -> CameraIntrinsics:
        h, w = self.image_size
        return CameraIntrinsics.from_hfov(int(w), int(h), math.radians(self.hfov_deg))

    def step_poses(self, i: int) -> List[Pose]:
        pos = self.trajectory[i]
        return [Pose.from_yaw(self.start_yaw + k * VIEW_SEPARATION, pos) for k in range(N_VIEWS)]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "SceneSpec":
        try:
            return cls(**data)
        except TypeError as e:
            raise InvalidSpec(str(e)) from None

    @classmethod
    def random(cls, seed: int = 0, n_boxes: int = 3, n_spheres: int = 2, n_steps: int = 5, **kw) -> "SceneSpec":
        """A furnished room with a short straight trajectory, fully determined by ``seed``."""
        rng = np.random.default_rng(seed)
        base = cls(seed=seed, **kw)
        lo, hi = base.bounds
        boxes, spheres = [], []
        for _ in range(n_boxes):
            size = rng.uniform([0.4, 0.4, 0.4], [1.2, 1.2, 1.2])
            x = rng.uniform(lo[0] + 0.2, hi[0] - 0.2 - size[0])
            z = rng.uniform(lo[2] + 0.2, hi[2] - 0.2 - size[2])
            if abs(x + size[0] / 2) < 1.5 and abs(z + size[2] / 2) < 1.5:
                z = hi[2] - 0.3 - size[2]  # keep the walkway clear
            bl = [float(x), float(hi[1] - size[1]), float(z)]
            tr = [float(bl[0] + size[0]), float(hi[1]), float(bl[2] + size[2])]
            boxes.append(Box(bl, tr, rng.uniform(0.15, 0.95, 3).tolist()))
        for _ in range(n_spheres):
            r = float(rng.uniform(0.25, 0.5))
            ang = rng.uniform(0, 2 * math.pi)
            dist = rng.uniform(2.0, min(hi[0], hi[2]) - r - 0.1)
            c = [float(dist * math.sin(ang)), float(hi[1] - r - rng.uniform(0.0, 0.8)), float(dist * math.cos(ang))]
            spheres.append(Sphere(c, r, rng.uniform(0.15, 0.95, 3).tolist()))
        traj = [[-0.6 + 1.2 * i / max(n_steps - 1, 1), 0.0, -0.3 + 0.6 * i / max(n_steps - 1, 1)]
                for i in range(n_steps)]
        return replace(base, boxes=boxes, spheres=spheres, trajectory=traj,
                       start_yaw=float(rng.uniform(-math.pi, math.pi)))


# Room faces: (axis, side, albedo); side 0 is the low wall on that axis.
_ROOM_ALBEDO = {(0, 0): (0.80, 0.72, 0.60), (0, 1): (0.62, 0.70, 0.80), (1, 0): (0.92, 0.92, 0.90),
                (1, 1): (0.45, 0.35, 0.28), (2, 0): (0.70, 0.80, 0.62), (2, 1): (0.78, 0.60, 0.66)}


def _shade(albedo, normal):
    lam = np.clip(-(normal @ LIGHT), 0.0, 1.0)
    return np.clip(albedo * (AMBIENT + (1 - AMBIENT) * lam)[..., None], 0.0, 1.0)


def ray_cast(spec: SceneSpec, origins, directions):
    """Exact first hit of each ray: (distance, rgb, normal)."""
    o = np.asarray(origins, np.float64).reshape(-1, 3)
    d = np.asarray(directions, np.float64).reshape(-1, 3)
    n = len(d)
    lo, hi = spec.bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        # leaving the room: the nearest exit plane along each axis
        t_exit = np.where(d > 0, (hi - o) * inv, np.where(d < 0, (lo - o) * inv, np.inf))
    axis = np.argmin(t_exit, axis=1)
    best = t_exit[np.arange(n), axis]
    side = (d[np.arange(n), axis] > 0).astype(int)
    alb = np.array([_ROOM_ALBEDO[(a, s)] for a, s in zip(axis, side)]) if n else np.zeros((0, 3))
    normal = np.zeros((n, 3))
    normal[np.arange(n), axis] = np.where(side == 1, -1.0, 1.0)

    for b in spec.boxes:
        blo, bhi = np.asarray(b.lo, float), np.asarray(b.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (blo - o) * inv
            t1 = (bhi - o) * inv
        tn = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
        tf = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
        t_in = tn.max(axis=1)
        hit = (t_in <= tf.min(axis=1)) & (t_in > 0) & (t_in < best)
        if hit.any():
            ax = np.argmax(tn, axis=1)
            best = np.where(hit, t_in, best)
            alb[hit] = b.albedo
            nrm = np.zeros((n, 3))
            nrm[np.arange(n), ax] = -np.sign(d[np.arange(n), ax])
            normal[hit] = nrm[hit]
    for s in spec.spheres:
        c = np.asarray(s.center, float)
        oc = o - c
        bq = np.einsum("ij,ij->i", oc, d)
        disc = bq * bq - (np.einsum("ij,ij->i", oc, oc) - s.radius ** 2)
        root = np.sqrt(np.maximum(disc, 0.0))
        t = -bq - root
        t = np.where(t > 0, t, -bq + root)
        hit = (disc >= 0) & (t > 0) & (t < best)
        if hit.any():
            best = np.where(hit, t, best)
            alb[hit] = s.albedo
            normal[hit] = (o[hit] + t[hit, None] * d[hit] - c) / s.radius
    return best, _shade(alb, normal), normal


def render_view(spec: SceneSpec, pose: Pose, intr: Optional[CameraIntrinsics] = None):
    """Ground-truth (rgb (H, W, 3), camera-z depth (H, W)) for one pose."""
    intr = intr or spec.intrinsics
    rays = camera_rays(intr, pose)
    t, rgb, _ = ray_cast(spec, rays.origins, rays.directions)
    fwd = pose.R[:, 2]
    depth = t * (rays.directions.reshape(-1, 3) @ fwd)
    h, w = intr.height, intr.width
    return rgb.reshape(h, w, 3), depth.reshape(h, w)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    steps: List[StepObservation]

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.spec.intrinsics

    def ground_truth(self, pose: Pose, intr: Optional[CameraIntrinsics] = None):
        return render_view(self.spec, pose, intr)


def synth_scene(spec: SceneSpec, with_features: bool = True) -> SyntheticScene:
    """Ray-cast the 12-view panorama at every trajectory point."""
    spec.validate()
    steps = []
    for i in range(len(spec.trajectory)):
        poses = spec.step_poses(i)
        views = [render_view(spec, p) for p in poses]
        rgb = np.stack([v[0] for v in views])
        depth = np.stack([v[1] for v in views])
        feats = None
        if with_features:
            feats = np.stack([random_projection_features(im, tuple(spec.grid_size), spec.feature_dim, spec.seed)
                              for im in rgb])
        steps.append(StepObservation(rgb, depth, poses, feats))
    return SyntheticScene(spec, steps)


def load_scene_spec(path) -> SceneSpec:
    with open(path) as f:
        return SceneSpec.from_json(json.load(f))
