"""Incremental point / feature clouds built from posed panoramic observations.

Both clouds are append-only: integrating a step never touches existing
entries, so a snapshot is just the current length.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from npr.errors import (
    BadMagic,
    CorruptLength,
    DimensionMismatch,
    MissingFeatures,
    NonPositiveDepth,
    VersionUnsupported,
)
from npr.geometry import CameraIntrinsics, Pose, unproject_depth_map, wrap_angle

N_VIEWS = 12
VIEW_SEPARATION = math.radians(30.0)
FAR_PLANE = 10.0

NPCD_MAGIC = b"NPCD"
NPCD_VERSION = 1
_NPCD_HEADER = struct.Struct("<4sIBIQ")


@dataclass
class StepObservation:
    """Twelve posed RGB-D views (and optional grid features) taken at one step."""

    rgb: np.ndarray  # (12, H, W, 3) in [0, 1]
    depth: np.ndarray  # (12, H, W) meters
    poses: Sequence[Pose]
    features: Optional[np.ndarray] = None  # (12, H', W', D)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb)
        self.depth = np.asarray(self.depth)
        if len(self.poses) != N_VIEWS or len(self.rgb) != N_VIEWS or len(self.depth) != N_VIEWS:
            raise DimensionMismatch("a step needs exactly %d views" % N_VIEWS)
        if self.rgb.shape[:3] != self.depth.shape or self.rgb.shape[-1] != 3:
            raise DimensionMismatch("rgb %s and depth %s disagree" % (self.rgb.shape, self.depth.shape))
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.ndim != 4 or len(self.features) != N_VIEWS:
                raise DimensionMismatch("features must be (12, H', W', D)")
        yaws = np.array([p.yaw for p in self.poses])
        steps = wrap_angle(np.diff(yaws))
        if np.any(np.abs(steps - VIEW_SEPARATION) > 1e-6):
            raise DimensionMismatch("consecutive views must be 30 degrees apart in yaw")

    @property
    def image_shape(self):
        return self.depth.shape[1:]


class _AppendOnly:
    """Growable column store; every column shares the row count."""

    def __init__(self, widths: dict, dtype=np.float32):
        self._cols = {k: np.empty((16,) + ((w,) if w else ()), dtype) for k, w in widths.items()}
        self._n = 0

    def __len__(self):
        return self._n

    def append(self, **cols):
        m = len(next(iter(cols.values())))
        need = self._n + m
        for k, arr in self._cols.items():
            if need > len(arr):
                cap = max(need, 2 * len(arr))
                grown = np.empty((cap,) + arr.shape[1:], arr.dtype)
                grown[: self._n] = arr[: self._n]
                self._cols[k] = arr = grown
            arr[self._n:need] = cols[k]
        self._n = need

    def view(self, k, n=None):
        return self._cols[k][: self._n if n is None else n]


class PointCloudB:
    """Colored world points: the appearance store."""

    kind = 0

    def __init__(self, positions=None, colors=None):
        self._store = _AppendOnly({"positions": 3, "colors": 3})
        if positions is not None:
            self.append(positions, colors)

    def __len__(self):
        return len(self._store)

    @property
    def dim(self) -> int:
        return 3

    @property
    def positions(self) -> np.ndarray:
        return self._store.view("positions")

    @property
    def colors(self) -> np.ndarray:
        return self._store.view("colors")

    def append(self, positions, colors):
        positions = np.asarray(positions, np.float32).reshape(-1, 3)
        colors = np.asarray(colors, np.float32).reshape(-1, 3)
        if len(positions) != len(colors):
            raise DimensionMismatch("positions and colors differ in length")
        if len(positions):
            self._store.append(positions=positions, colors=colors)

    def snapshot(self, n: Optional[int] = None) -> "PointCloudB":
        """Independent copy of the first ``n`` (default: all) entries."""
        n = len(self) if n is None else n
        return PointCloudB(self._store.view("positions", n).copy(), self._store.view("colors", n).copy())

    def arrays(self):
        return [self.positions, self.colors]


class FeatureCloudM:
    """World-positioned grid features with view direction and metric scale."""

    kind = 1

    def __init__(self, dim: int, positions=None, features=None, directions=None, scales=None):
        self._dim = int(dim)
        self._store = _AppendOnly({"positions": 3, "features": self._dim, "directions": 0, "scales": 0})
        if positions is not None:
            self.append(positions, features, directions, scales)

    def __len__(self):
        return len(self._store)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def positions(self):
        return self._store.view("positions")

    @property
    def features(self):
        return self._store.view("features")

    @property
    def directions(self):
        return self._store.view("directions")

    @property
    def scales(self):
        return self._store.view("scales")

    def append(self, positions, features, directions, scales):
        positions = np.asarray(positions, np.float32).reshape(-1, 3)
        features = np.asarray(features, np.float32).reshape(-1, self._dim)
        directions = np.asarray(directions, np.float32).reshape(-1)
        scales = np.asarray(scales, np.float32).reshape(-1)
        if not len(positions) == len(features) == len(directions) == len(scales):
            raise DimensionMismatch("feature-cloud columns differ in length")
        if len(positions) and np.any(scales <= 0):
            raise ValueError("feature scales must be positive")
        if len(positions):
            self._store.append(positions=positions, features=features, directions=directions, scales=scales)

    def snapshot(self, n: Optional[int] = None) -> "FeatureCloudM":
        n = len(self) if n is None else n
        v = self._store.view
        return FeatureCloudM(self._dim, v("positions", n).copy(), v("features", n).copy(),
                             v("directions", n).copy(), v("scales", n).copy())

    def arrays(self):
        return [self.positions, self.features, self.directions, self.scales]


def _valid_depth(d, far):
    return (d > 0) & (d <= far)


def integrate_step_points(cloud: PointCloudB, obs: StepObservation, intr: CameraIntrinsics,
                          far: float = FAR_PLANE) -> PointCloudB:
    """Append one point per valid depth pixel of every view (no deduplication)."""
    if obs.image_shape != (intr.height, intr.width):
        raise DimensionMismatch("observation %s does not match intrinsics %dx%d"
                                % (obs.image_shape, intr.height, intr.width))
    for rgb, depth, pose in zip(obs.rgb, obs.depth, obs.poses):
        keep = _valid_depth(depth, far)
        if not keep.any():
            continue
        pts = unproject_depth_map(intr, pose, np.where(keep, depth, 1.0))
        cloud.append(pts[keep], rgb[keep])
    return cloud


def feature_scale(intr: CameraIntrinsics, depth: float, grid_width: int) -> float:
    """Metric footprint of one feature-grid cell at ``depth``."""
    if not depth > 0:
        raise NonPositiveDepth("depth must be positive, got %r" % (depth,))
    if grid_width < 1:
        raise ValueError("grid width must be >= 1")
    return (1.0 / grid_width) * (math.tan(intr.hfov / 2.0) * depth)


def _patch_edges(n_pixels: int, n_cells: int) -> np.ndarray:
    return (np.arange(n_cells + 1) * n_pixels) // n_cells


def patch_mean_depth(depth: np.ndarray, grid_hw, far: float = FAR_PLANE) -> np.ndarray:
    """Mean of the valid depths inside each grid cell's image patch; 0 where none are valid."""
    gh, gw = grid_hw
    he, we = _patch_edges(depth.shape[0], gh), _patch_edges(depth.shape[1], gw)
    valid = _valid_depth(depth, far)
    dsum = np.add.reduceat(np.add.reduceat(np.where(valid, depth, 0.0), he[:-1], axis=0), we[:-1], axis=1)
    cnt = np.add.reduceat(np.add.reduceat(valid.astype(np.int64), he[:-1], axis=0), we[:-1], axis=1)
    return np.where(cnt > 0, dsum / np.maximum(cnt, 1), 0.0)


def integrate_step_features(cloud: FeatureCloudM, obs: StepObservation, intr: CameraIntrinsics,
                            far: float = FAR_PLANE) -> FeatureCloudM:
    """Append one entry per feature-grid cell whose image patch has a valid depth."""
    if obs.features is None:
        raise MissingFeatures("observation carries no feature maps")
    if obs.image_shape != (intr.height, intr.width):
        raise DimensionMismatch("observation does not match intrinsics")
    gh, gw, dim = obs.features.shape[1:]
    if dim != cloud.dim:
        raise DimensionMismatch("feature dim %d != cloud dim %d" % (dim, cloud.dim))
    if gh > intr.height or gw > intr.width:
        raise DimensionMismatch("feature grid finer than the image")
    he, we = _patch_edges(intr.height, gh), _patch_edges(intr.width, gw)
    ch = (he[:-1] + he[1:]) / 2.0
    cw = (we[:-1] + we[1:]) / 2.0
    cw_grid, ch_grid = np.meshgrid(cw, ch)
    scale_per_m = math.tan(intr.hfov / 2.0) / gw
    for feats, depth, pose in zip(obs.features, obs.depth, obs.poses):
        d = patch_mean_depth(depth, (gh, gw), far)
        keep = d > 0
        if not keep.any():
            continue
        cam = np.stack([(cw_grid - intr.cx) / intr.fx * d, (ch_grid - intr.cy) / intr.fy * d, d], axis=-1)
        q = cam[keep] @ pose.R.T + pose.t
        n = len(q)
        cloud.append(q, feats[keep], np.full(n, wrap_angle(pose.yaw)), scale_per_m * d[keep])
    return cloud


def save_cloud(path, cloud) -> None:
    arrays = cloud.arrays()
    with open(path, "wb") as f:
        f.write(_NPCD_HEADER.pack(NPCD_MAGIC, NPCD_VERSION, cloud.kind, cloud.dim, len(cloud)))
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_cloud(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _NPCD_HEADER.size:
        if blob[:4] != NPCD_MAGIC[: len(blob)]:
            raise BadMagic("not an NPCD file: %s" % path)
        raise CorruptLength("truncated NPCD header")
    magic, version, kind, dim, n = _NPCD_HEADER.unpack_from(blob)
    if magic != NPCD_MAGIC:
        raise BadMagic("not an NPCD file: %s" % path)
    if version != NPCD_VERSION:
        raise VersionUnsupported("NPCD version %d" % version)
    if kind == 0:
        widths = [3, 3]
    elif kind == 1:
        widths = [3, dim, 1, 1]
    else:
        raise VersionUnsupported("unknown NPCD kind %d" % kind)
    expected = _NPCD_HEADER.size + 4 * n * sum(widths)
    if len(blob) != expected:
        raise CorruptLength("NPCD body is %d bytes, header implies %d" % (len(blob), expected))
    cols, off = [], _NPCD_HEADER.size
    for w in widths:
        a = np.frombuffer(blob, "<f4", count=n * w, offset=off).astype(np.float32)
        cols.append(a.reshape(n, w) if w > 1 or kind == 0 else a)
        off += 4 * n * w
    if kind == 0:
        return PointCloudB(*cols)
    return FeatureCloudM(dim, *cols)


RgbEncoder = Callable[[np.ndarray], np.ndarray]


def random_projection_features(rgb: np.ndarray, grid_hw=(14, 14), dim: int = 16, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in for a learned grid-feature extractor.

    Each grid cell's patch statistics (mean color, color spread) are pushed
    through a fixed seeded random projection and a tanh.
    """
    gh, gw = grid_hw
    he, we = _patch_edges(rgb.shape[0], gh), _patch_edges(rgb.shape[1], gw)
    area = np.outer(np.diff(he), np.diff(we))[..., None]
    mean = np.add.reduceat(np.add.reduceat(rgb, he[:-1], axis=0), we[:-1], axis=1) / area
    sq = np.add.reduceat(np.add.reduceat(rgb * rgb, he[:-1], axis=0), we[:-1], axis=1) / area
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    stats = np.concatenate([mean, std, np.ones(mean.shape[:2] + (1,))], axis=-1)
    proj = np.random.default_rng(seed).normal(size=(stats.shape[-1], dim)) * 1.5
    return np.tanh(stats @ proj).astype(np.float32)
