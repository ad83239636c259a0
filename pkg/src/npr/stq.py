"""Search-then-query sampling.

Two consumers share the machinery here:

* the splatting branch thins the dense point cloud with
  :func:`density_peak_select` before regressing Gaussians;
* the volume branch queries the feature cloud around every ray sample
  (:class:`FeatureField`) to regress radiance and density.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from npr import _backend
from npr.clouds import FeatureCloudM, PointCloudB
from npr.errors import EmptyCloud, WeightsNotLoaded
from npr.geometry import Ray
from npr.kdtree import KDTree
from npr.nets import MlpWeights, NetBundle, _activate, mlp_forward

MIN_NEIGHBOR_DISTANCE = 1e-8


@dataclass(frozen=True)
class SamplingConfig:
    k: int = 16  # neighbours per query; accuracy saturates at 16
    radius: float = 1.0  # KNN radius R for point densities (m)
    radius_hat: float = 1.0  # neighbour radius for ray samples (m)
    epsilon: float = 0.1  # occupancy pre-filter threshold (m)
    grid_cell: float = 0.1  # occupancy lattice spacing (m)
    ray_near: float = 0.0
    ray_far: float = 10.0  # rays span 0-10 m
    samples_per_ray: int = 256
    tau: float = 0.5  # density quantile for the non-peak selection
    select_radius: float = 0.05  # suppression radius of the peak selection (m)
    leaf_size: int = 16

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (self.radius > 0 and self.radius_hat > 0 and self.epsilon > 0 and self.grid_cell > 0):
            raise ValueError("radii, epsilon and grid cell must be positive")
        if not self.ray_far > self.ray_near:
            raise ValueError("ray_far must exceed ray_near")
        if self.samples_per_ray < 2:
            raise ValueError("need at least two samples per ray")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be a quantile in [0, 1]")
        if not self.select_radius >= 0:
            raise ValueError("select_radius must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SamplingConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError("unknown sampling keys: %s" % sorted(unknown))
        return cls(**data)


class OccupancyTree:
    """Exact KD-tree plus the coarse occupancy lattice used by the epsilon filter."""

    def __init__(self, positions, grid_cell: float = 0.1, leaf_size: int = 16):
        self.kd = KDTree(positions, leaf_size)
        self.grid_cell = float(grid_cell)

    def __len__(self):
        return len(self.kd)

    @property
    def positions(self) -> np.ndarray:
        return self.kd.positions

    def occupancy_sq_distance(self, points=None) -> np.ndarray:
        """Squared distance from each point to its nearest lattice node."""
        p = self.positions if points is None else np.asarray(points, np.float64)
        off = p - np.round(p / self.grid_cell) * self.grid_cell
        return np.sum(off * off, axis=-1)

    def knn(self, queries, k, radius, threads=1):
        return self.kd.knn(queries, k, radius, threads)


def build_tree(positions, cfg: Optional[SamplingConfig] = None) -> OccupancyTree:
    cfg = cfg or SamplingConfig()
    return OccupancyTree(positions, cfg.grid_cell, cfg.leaf_size)


def knn_search(tree, query, k: int, radius: float):
    """Up to ``k`` ``(index, distance)`` pairs within ``radius``, by (distance, index)."""
    kd = tree.kd if isinstance(tree, OccupancyTree) else tree
    idx, dist, n = kd.knn(np.asarray(query, np.float64).reshape(1, 3), k, radius)
    return [(int(i), float(d)) for i, d in zip(idx[0, : n[0]], dist[0, : n[0]])]


def point_densities(tree: OccupancyTree, k: int, radius: float, threads: int = 1, kernels=None) -> np.ndarray:
    """rho_i = 1 / (sum of distances to the <= k nearest other points within radius).

    Points without neighbours get 0; points whose neighbours all coincide
    with them get +inf.
    """
    n = len(tree)
    idx, dist, _ = tree.kd.knn(tree.positions, k + 1, radius, threads, kernels=kernels)
    not_self = (idx >= 0) & (idx != np.arange(n)[:, None])
    # keep the first k non-self hits of every row
    rank = np.cumsum(not_self, axis=1)
    use = not_self & (rank <= k)
    total = np.where(use, dist, 0.0).sum(axis=1)
    has = use.any(axis=1)
    with np.errstate(divide="ignore"):
        rho = np.where(has, 1.0 / total, 0.0)
    return rho


@dataclass
class SelectedPoints:
    positions: np.ndarray  # (M, 3)
    colors: np.ndarray  # (M, 3)
    indices: np.ndarray  # (M,) ascending source indices

    def __len__(self):
        return len(self.indices)


def density_peak_select(cloud: PointCloudB, cfg: Optional[SamplingConfig] = None, threads: int = 1,
                        kernels=None) -> SelectedPoints:
    """Thin a dense cloud to representative points.

    Points are ranked by density (descending, ties to the lower index) and
    visited in that order. A point is kept when no kept point lies within
    ``select_radius`` of it and it is either a density peak among all points
    within ``select_radius`` or denser than the ``tau`` quantile. Points that
    fail the occupancy epsilon filter are never kept. Kept points are
    pairwise farther apart than ``select_radius``, so selecting again from
    the result returns it unchanged.
    """
    cfg = cfg or SamplingConfig()
    if len(cloud) == 0:
        raise EmptyCloud("cannot select from an empty cloud")
    kern = kernels or _backend.kernels
    tree = build_tree(cloud.positions, cfg)
    n = len(tree)
    rho = point_densities(tree, cfg.k, cfg.radius, threads, kernels=kern)
    eligible = tree.occupancy_sq_distance() < cfg.epsilon ** 2
    threshold = np.quantile(rho, cfg.tau, method="lower")
    above = rho > threshold
    order = np.lexsort((np.arange(n), -rho)).astype(np.int64)
    ptr, nbr, _ = tree.kd.query_radius(tree.positions, cfg.select_radius, threads, kernels=kern)
    keep = kern.greedy_select(order, eligible.astype(np.uint8), above.astype(np.uint8),
                              ptr.astype(np.int64), nbr.astype(np.int64))
    sel = np.nonzero(keep)[0]
    return SelectedPoints(cloud.positions[sel].astype(np.float64), cloud.colors[sel].astype(np.float64), sel)


def sample_ray_points(ray: Ray, cfg: Optional[SamplingConfig] = None):
    """Segment-midpoint samples: returns (positions (S, 3), t (S,), delta (S,))."""
    cfg = cfg or SamplingConfig()
    t, delta = sample_depths(cfg)
    pos = np.asarray(ray.origin, np.float64) + t[:, None] * np.asarray(ray.direction, np.float64)
    return pos, t, delta


def sample_depths(cfg: SamplingConfig):
    s = cfg.samples_per_ray
    step = (cfg.ray_far - cfg.ray_near) / s
    t = cfg.ray_near + (np.arange(s) + 0.5) * step
    return t, np.full(s, step)


def _require(net: Optional[MlpWeights], name: str) -> MlpWeights:
    if net is None:
        raise WeightsNotLoaded("%s weights not loaded" % name)
    return net


def inverse_distance_weights(dist: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Normalized 1/d weights over the valid entries of each row (zero rows stay zero)."""
    w = np.where(valid, 1.0 / np.maximum(dist, MIN_NEIGHBOR_DISTANCE), 0.0)
    s = w.sum(axis=-1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w), where=s > 0)


@dataclass
class PointFeature:
    """Result of aggregating one sample's neighbourhood."""

    aggregated: np.ndarray  # f'_q (D,)
    per_neighbor: np.ndarray  # f_{q,h_k} (K', D)
    weights: np.ndarray  # normalized inverse-distance weights (K',)
    neighbors: np.ndarray  # feature-cloud indices (K',)
    empty: bool


def heading_offsets(offsets, theta) -> np.ndarray:
    """Rotate world offsets q - h_k into the heading frame of each entry's capture view (yaw theta_k)."""
    o = np.asarray(offsets, np.float64)
    c, s = np.cos(np.asarray(theta, np.float64)), np.sin(np.asarray(theta, np.float64))
    return np.stack([c * o[..., 0] - s * o[..., 2], o[..., 1], s * o[..., 0] + c * o[..., 2]], axis=-1)


def aggregate_point_feature(q, tree: OccupancyTree, cloud: FeatureCloudM, cfg: SamplingConfig,
                            phi1: Optional[MlpWeights]) -> PointFeature:
    """Inverse-distance aggregation of the neighbouring grid features of one sample."""
    phi1 = _require(phi1, "phi1")
    q = np.asarray(q, np.float64)
    hits = knn_search(tree, q, cfg.k, cfg.radius_hat)
    d = cloud.dim
    if not hits:
        return PointFeature(np.zeros(d), np.zeros((0, d)), np.zeros(0), np.zeros(0, np.int64), True)
    nb = np.array([i for i, _ in hits], np.int64)
    dist = np.array([x for _, x in hits])
    w = inverse_distance_weights(dist, np.ones(len(nb), bool))
    feats = cloud.features[nb].astype(np.float64)
    base = w @ feats
    rel = heading_offsets(q - cloud.positions[nb].astype(np.float64), cloud.directions[nb])
    per = mlp_forward(phi1, np.concatenate([np.broadcast_to(base, (len(nb), d)), rel], axis=1))
    agg = (cloud.scales[nb].astype(np.float64) * w) @ per
    return PointFeature(agg, per, w, nb, False)


def direction_encoding(directions, weights, ray_yaw: float) -> np.ndarray:
    """Weighted (cos, sin) of neighbour view directions relative to the ray yaw."""
    rel = np.asarray(directions, np.float64) - ray_yaw
    return np.array([weights @ np.cos(rel), weights @ np.sin(rel)])


def regress_radiance_density(feat: PointFeature, directions, phi2: Optional[MlpWeights],
                             phi3: Optional[MlpWeights], ray_yaw: float = 0.0):
    """(radiance (D,), density >= 0) of one sample from its aggregated neighbourhood."""
    phi2, phi3 = _require(phi2, "phi2"), _require(phi3, "phi3")
    if feat.empty:
        return np.zeros(phi2.out_dim), 0.0
    enc = direction_encoding(directions, feat.weights, ray_yaw)
    r = mlp_forward(phi2, np.concatenate([feat.aggregated, enc]))
    sigma = float(feat.weights @ mlp_forward(phi3, feat.per_neighbor)[:, 0])
    return r, sigma


class FeatureField:
    """Batched radiance/density queries against a feature-cloud snapshot."""

    def __init__(self, cloud: FeatureCloudM, nets: NetBundle, cfg: Optional[SamplingConfig] = None,
                 threads: int = 1):
        self.cfg = cfg or SamplingConfig()
        self.phi1 = _require(nets.phi1, "phi1")
        self.phi2 = _require(nets.phi2, "phi2")
        self.phi3 = _require(nets.phi3, "phi3")
        if self.phi3.layers[-1].activation != "softplus":
            raise ValueError("density head must end in a softplus")
        self.dim = self.phi2.out_dim
        if len(cloud) and cloud.dim != self.phi3.in_dim:
            raise ValueError("feature dim %d does not match networks (%d)" % (cloud.dim, self.phi3.in_dim))
        self.threads = threads
        self.n = len(cloud)
        if self.n:
            self.tree = build_tree(cloud.positions, self.cfg)
            self.positions = cloud.positions.astype(np.float64)
            self.features = cloud.features.astype(np.float64)
            self.directions = cloud.directions.astype(np.float64)
            self.scales = cloud.scales.astype(np.float64)
            self.dim_in = cloud.dim
            rest = self.phi1.layers[1:]
            self._phi1_rest = MlpWeights(rest) if rest else None

    def query(self, points, ray_yaw):
        """Radiance (n, D), density (n,) and neighbour count (n,) at sample points."""
        points = np.asarray(points, np.float64).reshape(-1, 3)
        n = len(points)
        rad = np.zeros((n, self.dim))
        sigma = np.zeros(n)
        if self.n == 0 or n == 0:
            return rad, sigma, np.zeros(n, np.int64)
        idx, dist, count = self.tree.knn(points, self.cfg.k, self.cfg.radius_hat, self.threads)
        rows = np.nonzero(count > 0)[0]
        if len(rows) == 0:
            return rad, sigma, count
        yaw = np.broadcast_to(np.asarray(ray_yaw, np.float64), (n,))
        for lo in range(0, len(rows), self.chunk):
            r = rows[lo: lo + self.chunk]
            rad[r], sigma[r] = self._regress(points[r], idx[r], dist[r], yaw[r])
        return rad, sigma, count

    chunk = 8192

    def _regress(self, q, idx, dist, yaw):
        # phi1's first layer splits into a per-sample feature term and a
        # per-neighbour offset term: W [f_q, o] = Wf f_q + Wp o.
        valid = idx >= 0
        safe = np.where(valid, idx, 0)
        w = inverse_distance_weights(dist, valid)
        base = np.einsum("rk,rkd->rd", w, self.features[safe])
        first = self.phi1.layers[0]
        wf, wp = first.weight[:, : self.dim_in], first.weight[:, self.dim_in:]
        pre_q = base @ wf.T + first.bias
        pr, pk = np.nonzero(valid)
        nb = safe[pr, pk]
        off = heading_offsets(q[pr] - self.positions[nb], self.directions[nb])
        hidden = _activate(first.activation, pre_q[pr] + off @ wp.T)
        per = np.zeros(idx.shape + (self.phi1.out_dim,))
        per[pr, pk] = mlp_forward(self._phi1_rest, hidden) if self._phi1_rest else hidden
        dens = np.zeros(idx.shape)
        dens[pr, pk] = mlp_forward(self.phi3, per[pr, pk])[:, 0]
        agg = np.einsum("rk,rkd->rd", self.scales[safe] * w, per)
        reld = self.directions[safe] - yaw[:, None]
        enc = np.stack([(w * np.cos(reld)).sum(axis=1), (w * np.sin(reld)).sum(axis=1)], axis=1)
        radiance = mlp_forward(self.phi2, np.concatenate([agg, enc], axis=1))
        return radiance, (w * dens).sum(axis=1)
