"""Pinhole camera model, pose algebra and ray generation.

Conventions used throughout the package:

* camera frame is right-handed with +x right, +y down and +z forward;
* a :class:`Pose` maps camera coordinates to world coordinates
  (``p_world = R @ p_cam + t``);
* pixel coordinates are continuous ``(h, w)`` = (row, column); the integer
  pixel ``(i, j)`` is sampled at its center ``(i + 0.5, j + 0.5)``;
* depth is the camera-frame forward (z) distance, not the ray length.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from npr.errors import (
    BehindCamera,
    NonPositiveDepth,
    PixelOutOfBounds,
    ZeroQuaternion,
)

NEAR_PLANE = 0.01


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov: float) -> "CameraIntrinsics":
        """Square-pixel intrinsics with the principal point at the image center.

        ``hfov`` is in radians.
        """
        if not 0.0 < hfov < math.pi:
            raise ValueError("hfov must lie in (0, pi)")
        # tan(h/2) = sin h / (1 + cos h); exact at 90 degrees where math.tan(pi/4) is not
        f = (width / 2.0) * (1.0 + math.cos(hfov)) / math.sin(hfov)
        return cls(width, height, f, f, width / 2.0, height / 2.0)

    @property
    def hfov(self) -> float:
        return 2.0 * math.atan(self.width / (2.0 * self.fx))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Same field of view at a different resolution."""
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(width, height, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.width, "h": self.height}

    @classmethod
    def from_json(cls, data: dict) -> "CameraIntrinsics":
        """Accepts ``{"w","h","hfov_deg"}`` or explicit ``{"w","h","fx","fy","cx","cy"}``."""
        w, h = int(data["w"]), int(data["h"])
        if "hfov_deg" in data:
            return cls.from_hfov(w, h, math.radians(float(data["hfov_deg"])))
        return cls(w, h, float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]))


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; the input is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    n = math.sqrt(float(q @ q))
    if n == 0.0 or not math.isfinite(n):
        raise ZeroQuaternion("cannot normalize quaternion %r" % (q.tolist(),))
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Vectorized :func:`quat_to_matrix` for an (N, 4) array; rows are normalized first."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    n = np.sqrt(np.einsum("ij,ij->i", q, q))
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise ZeroQuaternion("cannot normalize a zero or non-finite quaternion")
    q = q / n[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((len(q), 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def yaw_quaternion(yaw: float) -> np.ndarray:
    """Quaternion of a rotation by ``yaw`` radians about +y (the vertical axis)."""
    return np.array([math.cos(yaw / 2.0), 0.0, math.sin(yaw / 2.0), 0.0])


def wrap_angle(a):
    """Wrap radians into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: tuple
    translation: tuple
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = math.sqrt(float(q @ q))
        if n == 0.0:
            raise ZeroQuaternion("zero rotation quaternion")
        object.__setattr__(self, "rotation", tuple(float(v) for v in q / n))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", tuple(float(v) for v in t))
        object.__setattr__(self, "_matrix", quat_to_matrix(self.rotation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_yaw(cls, yaw: float, position=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(tuple(yaw_quaternion(yaw)), tuple(position))

    @property
    def R(self) -> np.ndarray:
        return self._matrix

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation)

    @property
    def yaw(self) -> float:
        fwd = self._matrix[:, 2]
        return float(math.atan2(fwd[0], fwd[2]))

    def world_to_camera(self, p: np.ndarray) -> np.ndarray:
        """Camera-frame coordinates of world points (..., 3)."""
        return (np.asarray(p, dtype=np.float64) - self.t) @ self._matrix

    def camera_to_world(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self._matrix.T + self.t

    def to_json(self) -> dict:
        return {"q": list(self.rotation), "t": list(self.translation)}

    @classmethod
    def from_json(cls, data: dict) -> "Pose":
        return cls(tuple(data["q"]), tuple(data["t"]))


def load_pose(path) -> Pose:
    with open(path) as f:
        return Pose.from_json(json.load(f))


def load_intrinsics(path) -> CameraIntrinsics:
    with open(path) as f:
        return CameraIntrinsics.from_json(json.load(f))


def unproject_pixel(intr: CameraIntrinsics, pose: Pose, pixel, depth: float) -> np.ndarray:
    """World position of continuous pixel ``(h, w)`` observed at forward depth ``depth``."""
    h, w = float(pixel[0]), float(pixel[1])
    if not depth > 0:
        raise NonPositiveDepth("depth must be positive, got %r" % (depth,))
    if not (0.0 <= h <= intr.height and 0.0 <= w <= intr.width):
        raise PixelOutOfBounds("pixel (%g, %g) outside %dx%d image" % (h, w, intr.height, intr.width))
    cam = np.array([(w - intr.cx) / intr.fx * depth, (h - intr.cy) / intr.fy * depth, depth])
    return pose.R @ cam + pose.t


def unproject_depth_map(intr: CameraIntrinsics, pose: Pose, depth: np.ndarray) -> np.ndarray:
    """Vectorized unprojection of every pixel center of an H x W depth map -> (H, W, 3)."""
    hh, ww = np.meshgrid(np.arange(intr.height) + 0.5, np.arange(intr.width) + 0.5, indexing="ij")
    cam = np.stack([(ww - intr.cx) / intr.fx * depth, (hh - intr.cy) / intr.fy * depth, depth], axis=-1)
    return cam @ pose.R.T + pose.t


def project_point(intr: CameraIntrinsics, pose: Pose, p, near: float = NEAR_PLANE):
    """Returns ``((h, w), depth)``; the pixel may fall outside the image."""
    c = pose.R.T @ (np.asarray(p, dtype=np.float64) - pose.t)
    if c[2] <= near:
        raise BehindCamera("point at camera depth %g is behind the near plane" % c[2])
    return (intr.fy * c[1] / c[2] + intr.cy, intr.fx * c[0] / c[2] + intr.cx), float(c[2])


def project_points(intr: CameraIntrinsics, pose: Pose, p: np.ndarray):
    """Vectorized projection without the near-plane check.

    Returns (pixels (N, 2) as (h, w), depth (N,)).
    """
    c = pose.world_to_camera(p)
    z = c[..., 2]
    h = intr.fy * c[..., 1] / z + intr.cy
    w = intr.fx * c[..., 0] / z + intr.cx
    return np.stack([h, w], axis=-1), z


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class RayGrid:
    """One ray per pixel; ``origins`` and ``directions`` are (H, W, 3)."""

    origins: np.ndarray
    directions: np.ndarray

    def __getitem__(self, hw) -> Ray:
        return Ray(self.origins[hw], self.directions[hw])

    @property
    def shape(self):
        return self.directions.shape[:2]


def camera_rays(intr: CameraIntrinsics, pose: Pose) -> RayGrid:
    hh, ww = np.meshgrid(np.arange(intr.height) + 0.5, np.arange(intr.width) + 0.5, indexing="ij")
    cam = np.stack([(ww - intr.cx) / intr.fx, (hh - intr.cy) / intr.fy, np.ones_like(hh)], axis=-1)
    d = cam @ pose.R.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.t, d.shape).copy()
    return RayGrid(o, d)
