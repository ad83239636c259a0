"""End-to-end glue: observations -> clouds -> Gaussians / feature field -> renders."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from npr.clouds import FeatureCloudM, PointCloudB, StepObservation, integrate_step_features, integrate_step_points
from npr.geometry import CameraIntrinsics
from npr.nets import NetBundle, point_descriptor
from npr.splat import GaussianSet, make_gaussians
from npr.stq import SamplingConfig, SelectedPoints, density_peak_select


def ingest(steps: Iterable[StepObservation], intr: CameraIntrinsics, feature_dim: Optional[int] = None,
           points: Optional[PointCloudB] = None, features: Optional[FeatureCloudM] = None):
    """Integrate every step into the point cloud and, when steps carry features, the feature cloud."""
    points = points if points is not None else PointCloudB()
    for obs in steps:
        integrate_step_points(points, obs, intr)
        if obs.features is not None:
            if features is None:
                features = FeatureCloudM(feature_dim or obs.features.shape[-1])
            integrate_step_features(features, obs, intr)
    if features is None:
        features = FeatureCloudM(feature_dim or 1)
    return points, features


@dataclass
class SplatScene:
    selected: SelectedPoints
    image: GaussianSet
    feature: GaussianSet


def build_gaussians(cloud: PointCloudB, nets: NetBundle, cfg: Optional[SamplingConfig] = None,
                    threads: int = 1) -> SplatScene:
    """Select representative points, describe them and regress both Gaussian sets.

    An empty cloud yields empty Gaussian sets rather than an error.
    """
    if len(cloud) == 0:
        sel = SelectedPoints(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))
        return SplatScene(sel, GaussianSet.empty(3), GaussianSet.empty(nets.descriptor.out_dim))
    sel = density_peak_select(cloud, cfg, threads)
    desc = point_descriptor(sel.positions, sel.colors, nets.descriptor)
    g_img, g_feat = make_gaussians(sel, desc, nets.heads)
    return SplatScene(sel, g_img, g_feat)
