"""Self-check suite behind ``npr verify``.

Every check compares the library against an independent oracle or a
closed-form value at small scale, so the whole suite runs in seconds. Results
are reported as JUnit XML.
"""
from __future__ import annotations

import math
import time
import traceback
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np

from npr import oracles
from npr.clouds import (FeatureCloudM, PointCloudB, StepObservation, feature_scale, integrate_step_features,
                        integrate_step_points, load_cloud, save_cloud)
from npr.errors import BehindCamera, CorruptLength
from npr.fusion import NodeSet, fuse_stu, score_paths
from npr.geometry import (CameraIntrinsics, Pose, camera_rays, project_point, quat_to_matrix, unproject_pixel)
from npr.kdtree import KDTree
from npr.losses import PretrainParts, cosine_feature_loss, l1_loss, l2_loss, nav_ce_grad, nav_ce_loss, \
    pretrain_total, psnr, ssim, ssim_loss
from npr.nets import (AttentionWeights, NetBundle, PatchEncoder, cross_attention, default_bundle, finite_diff_check,
                      gaussian_heads, load_tensors, mlp_forward, point_descriptor, random_mlp, save_tensors)
from npr.splat import (GaussianSet, SplatConfig, covariance3d, naive_rasterize, project_covariance, rasterize)
from npr.stq import (FeatureField, SamplingConfig, aggregate_point_feature, build_tree, density_peak_select,
                     direction_encoding, knn_search, regress_radiance_density, sample_ray_points)
from npr.volume import AnalyticField, composite, render_feature_ray, render_panorama, render_feature_view
from npr.geometry import Ray


@dataclass
class CheckResult:
    group: str
    name: str
    ok: bool
    seconds: float
    message: str = ""


class Ctx:
    def __init__(self, nets: NetBundle, seed: int = 0, tmpdir: Optional[str] = None):
        self.nets = nets
        self.seed = seed
        self.tmpdir = tmpdir

    def rng(self, salt: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, salt])


CHECKS: List[tuple] = []


def check(group: str):
    def deco(fn: Callable):
        CHECKS.append((group, fn.__name__, fn))
        return fn
    return deco


def _close(a, b, tol, what=""):
    err = float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float)), initial=0.0))
    assert err < tol, "%s: max abs diff %.3g >= %.3g" % (what, err, tol)


def _random_pose(rng) -> Pose:
    return Pose(tuple(rng.normal(size=4)), tuple(rng.uniform(-3, 3, 3)))


INTR = CameraIntrinsics.from_hfov(224, 224, math.radians(90.0))


# -- geometry ----------------------------------------------------------------------

@check("geometry")
def focal_from_hfov(ctx):
    assert INTR.fx == 112.0 and INTR.cx == 112.0, INTR.fx


@check("geometry")
def unproject_roundtrip(ctx):
    rng = ctx.rng(1)
    worst = 0.0
    for _ in range(300):
        pose = _random_pose(rng)
        px = rng.uniform([0, 0], [224, 224])
        d = rng.uniform(0.1, 10)
        (h, w), z = project_point(INTR, pose, unproject_pixel(INTR, pose, px, d))
        worst = max(worst, abs(h - px[0]), abs(w - px[1]))
        assert abs(z - d) < 1e-9
    assert worst < 1e-6, worst


@check("geometry")
def project_matches_matrix_pipeline(ctx):
    rng = ctx.rng(2)
    for _ in range(200):
        pose = _random_pose(rng)
        p = pose.camera_to_world(np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 8)]))
        (h, w), _ = project_point(INTR, pose, p)
        ref, _ = oracles.matrix_project(INTR, pose, p)
        _close([h, w], ref, 1e-9, "pixel")


@check("geometry")
def behind_camera_rejected(ctx):
    try:
        project_point(INTR, Pose.identity(), [0.0, 0.0, -1.0])
    except BehindCamera:
        return
    raise AssertionError("no BehindCamera raised")


@check("geometry")
def corner_ray_angle(ctx):
    intr = CameraIntrinsics.from_hfov(64, 48, math.radians(70))
    rays = camera_rays(intr, Pose.identity())
    d = rays.directions[0, 0]
    want = math.atan(math.hypot((intr.width / 2 - 0.5) / intr.fx, (intr.height / 2 - 0.5) / intr.fy))
    assert abs(math.acos(d[2]) - want) < 1e-9


@check("geometry")
def quaternion_orthonormal(ctx):
    rng = ctx.rng(3)
    for _ in range(500):
        q = rng.normal(size=4)
        R = quat_to_matrix(q)
        _close(R.T @ R, np.eye(3), 1e-9, "R^T R")
        assert abs(np.linalg.det(R) - 1) < 1e-9
        assert np.array_equal(R, quat_to_matrix(-q))


# -- clouds ------------------------------------------------------------------------

@check("clouds")
def feature_scale_value(ctx):
    assert abs(feature_scale(INTR, 2.8, 14) - 0.2) < 1e-12


def _tiny_step(rng, h=4, w=4, grid=(2, 2), dim=3):
    poses = [Pose.from_yaw(k * math.radians(30), (0.1, 0.0, -0.2)) for k in range(12)]
    return StepObservation(rng.uniform(0, 1, (12, h, w, 3)), rng.uniform(0.5, 4, (12, h, w)), poses,
                           rng.normal(size=(12,) + grid + (dim,)))


@check("clouds")
def point_integration_matches_unproject(ctx):
    rng = ctx.rng(4)
    intr = CameraIntrinsics.from_hfov(4, 4, math.radians(90))
    obs = _tiny_step(rng)
    cloud = integrate_step_points(PointCloudB(), obs, intr)
    assert len(cloud) == 12 * 16
    i = 0
    for v in range(12):
        for h in range(4):
            for w in range(4):
                ref = unproject_pixel(intr, obs.poses[v], (h + 0.5, w + 0.5), obs.depth[v, h, w])
                _close(cloud.positions[i], ref, 1e-5, "point")  # stored as float32
                i += 1


@check("clouds")
def feature_entries_match_patch_centers(ctx):
    rng = ctx.rng(5)
    intr = CameraIntrinsics.from_hfov(4, 4, math.radians(90))
    obs = _tiny_step(rng)
    cloud = integrate_step_features(FeatureCloudM(3), obs, intr)
    assert len(cloud) == 12 * 4
    v, gh, gw = 5, 1, 0
    d = obs.depth[v, 2:4, 0:2].mean()
    ref = unproject_pixel(intr, obs.poses[v], (3.0, 1.0), d)
    _close(cloud.positions[v * 4 + gh * 2 + gw], ref, 1e-5, "entry")
    assert abs(cloud.scales[v * 4 + 2] - feature_scale(intr, d, 2)) < 1e-6


@check("clouds")
def npcd_roundtrip_and_truncation(ctx):
    import os
    rng = ctx.rng(6)
    c = PointCloudB(rng.normal(size=(500, 3)), rng.uniform(0, 1, (500, 3)))
    path = os.path.join(ctx.tmpdir, "verify_points.npcd")
    save_cloud(path, c)
    back = load_cloud(path)
    assert np.array_equal(back.positions, c.positions) and np.array_equal(back.colors, c.colors)
    with open(path, "rb") as f:
        blob = f.read()
    with open(path, "wb") as f:
        f.write(blob[:-7])
    try:
        load_cloud(path)
    except CorruptLength:
        return
    finally:
        os.remove(path)
    raise AssertionError("truncated file accepted")


# -- search-then-query ---------------------------------------------------------------

@check("stq")
def knn_matches_exhaustive_scan(ctx):
    rng = ctx.rng(7)
    pts = rng.uniform(0, 3, (600, 3))
    tree = build_tree(pts)
    for q in rng.uniform(0, 3, (40, 3)):
        got = knn_search(tree, q, 16, 1.0)
        ref = oracles.exhaustive_knn(pts, q, 16, 1.0)
        assert [i for i, _ in got] == [i for i, _ in ref]
        _close([d for _, d in got], [d for _, d in ref], 1e-12, "dist")


@check("stq")
def knn_tie_prefers_lower_index(ctx):
    tree = build_tree(np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0, 5.0]]))
    assert [i for i, _ in knn_search(tree, [0, 0, 0], 2, 2.0)] == [0, 1]


@check("stq")
def selection_matches_rule_oracle(ctx):
    rng = ctx.rng(8)
    pts = np.concatenate([rng.normal([0, 0, 0], 0.05, (60, 3)), rng.normal([2, 0, 0], 0.05, (60, 3)),
                          rng.uniform(-1, 3, (40, 3))])
    cfg = SamplingConfig()
    sel = density_peak_select(PointCloudB(pts, np.zeros_like(pts)), cfg)
    p32 = pts.astype(np.float32).astype(np.float64)
    ref = oracles.select_reference(p32, cfg.k, cfg.radius, cfg.epsilon, cfg.grid_cell, cfg.tau, cfg.select_radius)
    assert list(sel.indices) == ref, "selection differs from the rule oracle"
    assert np.any(sel.indices < 60) and np.any((sel.indices >= 60) & (sel.indices < 120))


@check("stq")
def selection_idempotent(ctx):
    rng = ctx.rng(9)
    pts = rng.uniform(0, 1, (400, 3))
    cfg = SamplingConfig()
    s1 = density_peak_select(PointCloudB(pts, pts), cfg)
    s2 = density_peak_select(PointCloudB(s1.positions, s1.colors), cfg)
    assert np.array_equal(s2.indices, np.arange(len(s1)))


@check("stq")
def ray_midpoints(ctx):
    _, t, delta = sample_ray_points(Ray(np.zeros(3), np.array([0, 0, 1.0])), SamplingConfig())
    assert t[0] == 10 / 512 and abs(delta.sum() - 10) < 1e-9
    _, t2, _ = sample_ray_points(Ray(np.zeros(3), np.array([0, 0, 1.0])), SamplingConfig(samples_per_ray=2))
    assert list(t2) == [2.5, 7.5]


def _feature_cloud(rng, n=80, dim=16):
    return FeatureCloudM(dim, rng.uniform(-1, 1, (n, 3)), rng.normal(size=(n, dim)),
                         rng.uniform(-np.pi, np.pi, n), rng.uniform(0.05, 0.3, n))


@check("stq")
def aggregation_matches_loop(ctx):
    rng = ctx.rng(10)
    cloud = _feature_cloud(rng, dim=ctx.nets.feature_dim)
    tree = build_tree(cloud.positions)
    cfg = SamplingConfig()
    for q in rng.uniform(-1, 1, (10, 3)):
        got = aggregate_point_feature(q, tree, cloud, cfg, ctx.nets.phi1)
        hits = oracles.exhaustive_knn(cloud.positions.astype(float), q, cfg.k, cfg.radius_hat)
        agg, _, w = oracles.loop_aggregate(q, cloud.positions, cloud.features, cloud.scales, hits, ctx.nets.phi1,
                                           cloud.directions)
        _close(got.aggregated, agg, 1e-6, "aggregate")
        assert abs(sum(w) - 1) < 1e-9 and abs(got.weights.sum() - 1) < 1e-9


@check("stq")
def batched_field_matches_single_queries(ctx):
    rng = ctx.rng(11)
    cloud = _feature_cloud(rng, dim=ctx.nets.feature_dim)
    field = FeatureField(cloud, ctx.nets)
    q = rng.uniform(-1.2, 1.2, (30, 3))
    rad, sigma, _ = field.query(q, 0.4)
    for i in range(len(q)):
        pf = aggregate_point_feature(q[i], field.tree, cloud, field.cfg, ctx.nets.phi1)
        r, s = regress_radiance_density(pf, cloud.directions[pf.neighbors], ctx.nets.phi2, ctx.nets.phi3, 0.4)
        _close(rad[i], r, 1e-6, "radiance")
        assert abs(sigma[i] - s) < 1e-6 and s >= 0


# -- tiny nets ---------------------------------------------------------------------

@check("nets")
def mlp_matches_loop(ctx):
    rng = ctx.rng(12)
    w = random_mlp(rng, [7, 9, 5, 3], ["relu", "tanh", "sigmoid"])
    for x in rng.normal(size=(20, 7)):
        _close(mlp_forward(w, x), oracles.loop_mlp(w, x), 1e-6, "mlp")


@check("nets")
def gaussian_heads_composition(ctx):
    rng = ctx.rng(13)
    heads = ctx.nets.heads
    d = rng.normal(size=(50, heads.rotation.in_dim))
    q, s, a, _ = gaussian_heads(d, heads)
    raw = mlp_forward(heads.rotation, d)
    _close(q, raw / np.linalg.norm(raw, axis=1, keepdims=True), 1e-9, "quat")
    _close(s, np.clip(np.exp(mlp_forward(heads.scale, d)), 1e-6, 10), 1e-9, "scale")
    _close(a, 1 / (1 + np.exp(-mlp_forward(heads.opacity, d)[:, 0])), 1e-9, "opacity")


@check("nets")
def descriptor_full_scale_permutation(ctx):
    rng = ctx.rng(14)
    w = ctx.nets.descriptor
    w1 = replace(w, r1=1.0 - 1e-9, r2=0.5)  # coarse stages see every / every other point
    pts, cols = rng.normal(size=(32, 3)), rng.uniform(0, 1, (32, 3))
    perm = np.concatenate([rng.permutation(16) * 2, rng.permutation(16) * 2 + 1])
    perm = perm.reshape(2, 16).T.reshape(-1)  # keeps the even-index subset intact as a set
    a = point_descriptor(pts, cols, w1)
    b = point_descriptor(pts[perm], cols[perm], w1)
    _close(b, a[perm], 1e-9, "descriptor")


@check("nets")
def attention_matches_loop(ctx):
    rng = ctx.rng(15)
    d, h = 16, 4
    w = AttentionWeights(*(rng.normal(0, 0.3, (d, d)) for _ in range(4)), heads=h)
    q, k, v = rng.normal(size=(5, d)), rng.normal(size=(7, d)), rng.normal(size=(7, d))
    _close(cross_attention(w, q, k, v), oracles.loop_attention(w, q, k, v), 1e-6, "attention")


@check("nets")
def sigmoid_head_gradient(ctx):
    rng = ctx.rng(16)
    w = random_mlp(rng, [4, 1], ["sigmoid"])
    x = rng.normal(size=4)
    s = mlp_forward(w, x)[0]
    res = finite_diff_check(lambda v: mlp_forward(w, v)[0], x, s * (1 - s) * w.layers[0].weight[0])
    assert res.max_rel_error < 1e-4, res.max_rel_error


@check("nets")
def weight_file_roundtrip(ctx):
    import os
    path = os.path.join(ctx.tmpdir, "verify_weights.tnw")
    ctx.nets.save(path)
    try:
        back = NetBundle.load(path)
    finally:
        os.remove(path)
    for name, arr in ctx.nets.to_tensors().items():
        assert np.array_equal(np.asarray(arr, np.float32), back.to_tensors()[name]), name


# -- splatting ---------------------------------------------------------------------

@check("splat")
def covariance_eigenvalues(ctx):
    rng = ctx.rng(17)
    for _ in range(200):
        s = rng.uniform(0.01, 2, 3)
        cov = covariance3d(rng.normal(size=4), s)
        _close(cov, cov.T, 1e-12, "symmetry")
        _close(np.linalg.eigvalsh(cov), np.sort(s * s), 1e-9, "eigenvalues")


@check("splat")
def projected_covariance_on_axis(ctx):
    s, z = 0.2, 3.0
    cov2 = project_covariance(s * s * np.eye(3), Pose.identity(), INTR, [0, 0, z], dilation=0.0)
    want = (INTR.fx * s / z) ** 2
    _close(cov2, np.diag([want, want]), 1e-9, "on-axis")


@check("splat")
def projected_covariance_vs_numeric_jacobian(ctx):
    rng = ctx.rng(18)
    for _ in range(20):
        pose = _random_pose(rng)
        mean = pose.camera_to_world(np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 6)]))
        cov = covariance3d(rng.normal(size=4), rng.uniform(0.05, 0.5, 3))
        got = project_covariance(cov, pose, INTR, mean, dilation=0.0)

        def pix(p):
            (h, w), _ = project_point(INTR, pose, p)
            return np.array([w, h])
        J = oracles.numeric_jacobian(pix, mean, 1e-5)
        ref = J @ cov @ J.T
        assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-3


def _random_splats(rng, n, channels=3):
    pos = np.c_[rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(2, 5, n)]
    return GaussianSet(pos, rng.normal(size=(n, 4)), rng.uniform(0.02, 0.3, (n, 3)),
                       rng.uniform(0.1, 0.99, n), rng.uniform(0, 1, (n, channels)))


@check("splat")
def tile_rasterizer_matches_naive(ctx):
    rng = ctx.rng(19)
    gs = _random_splats(rng, 60)
    intr = CameraIntrinsics.from_hfov(48, 40, math.radians(80))
    bg = rng.uniform(0, 1, 3)
    a = rasterize(gs, Pose.identity(), intr, bg, cfg=SplatConfig.exact())
    b = naive_rasterize(gs, Pose.identity(), intr, bg)
    _close(a.pixels, b.pixels, 1e-9, "pixels")
    _close(a.alpha, b.alpha, 1e-9, "alpha")


@check("splat")
def two_gaussian_blend(ctx):
    intr = CameraIntrinsics(2, 2, 2.0, 2.0, 1.5, 1.5)  # pixel (1, 1) center is the principal point
    c1, c2, bg = np.array([1.0, 0.2, 0.0]), np.array([0.0, 0.5, 1.0]), np.array([0.3, 0.3, 0.3])
    gs = GaussianSet(np.array([[0, 0, 2.0], [0, 0, 3.0]]), np.array([[1.0, 0, 0, 0]] * 2),
                     np.full((2, 3), 0.1), np.array([0.5, 0.5]), np.stack([c1, c2]))
    out = rasterize(gs, Pose.identity(), intr, bg, cfg=SplatConfig.exact())
    _close(out.pixels[1, 1], 0.5 * c1 + 0.25 * c2 + 0.25 * bg, 1e-9, "blend")


@check("splat")
def single_gaussian_closed_form(ctx):
    rng = ctx.rng(20)
    intr = CameraIntrinsics.from_hfov(32, 32, math.radians(60))
    gs = GaussianSet(np.array([[0.1, -0.05, 2.5]]), rng.normal(size=(1, 4)), np.array([[0.1, 0.05, 0.08]]),
                     np.array([0.8]), np.array([[0.2, 0.6, 1.0]]))
    out = rasterize(gs, Pose.identity(), intr, cfg=SplatConfig.exact())
    cov2 = project_covariance(covariance3d(gs.rotations[0], gs.scales[0]), Pose.identity(), intr,
                              gs.positions[0], dilation=0.0)
    (h0, w0), _ = project_point(intr, Pose.identity(), gs.positions[0])
    inv = np.linalg.inv(cov2)
    for h, w in [(16, 16), (14, 17), (18, 15), (10, 20), (20, 12)]:
        d = np.array([w + 0.5 - w0, h + 0.5 - h0])
        _close(out.pixels[h, w], 0.8 * math.exp(-0.5 * d @ inv @ d) * gs.payload[0], 1e-9, "probe")


@check("splat")
def input_order_invariance(ctx):
    rng = ctx.rng(21)
    gs = _random_splats(rng, 80)
    p = rng.permutation(80)
    gp = GaussianSet(gs.positions[p], gs.rotations[p], gs.scales[p], gs.opacities[p], gs.payload[p])
    intr = CameraIntrinsics.from_hfov(40, 40, math.radians(80))
    a = rasterize(gs, Pose.identity(), intr)
    b = rasterize(gp, Pose.identity(), intr)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.alpha, b.alpha)


@check("splat")
def image_feature_alpha_identical(ctx):
    rng = ctx.rng(22)
    gs = _random_splats(rng, 50)
    gf = GaussianSet(gs.positions, gs.rotations, gs.scales, gs.opacities, rng.normal(size=(50, 16)))
    intr = CameraIntrinsics.from_hfov(32, 32, math.radians(80))
    assert np.array_equal(rasterize(gs, Pose.identity(), intr).alpha, rasterize(gf, Pose.identity(), intr).alpha)


# -- volume ------------------------------------------------------------------------

@check("volume")
def constant_field_closed_form(ctx):
    r, sigma = np.array([0.3, -1.2, 2.0]), 0.37
    res = render_feature_ray(Ray(np.zeros(3), np.array([0, 0, 1.0])), AnalyticField.uniform(sigma, r), full=True)
    want = r * (1 - math.exp(-sigma * 10.0))
    assert np.max(np.abs(res.value - want) / np.abs(want)) < 1e-3
    assert abs(res.weights.sum() - (1 - res.t_final)) < 1e-9


@check("volume")
def opaque_wall(ctx):
    rw = np.array([0.7, 0.1])

    def fn(p):
        wall = (p[:, 2] > 2.0) & (p[:, 2] < 2.0 + 10 / 256)
        rad = np.where(wall[:, None], rw, np.array([5.0, 5.0]))
        return rad, np.where(wall, 1e4, 0.0)
    res = render_feature_ray(Ray(np.zeros(3), np.array([0, 0, 1.0])), AnalyticField(fn, 2), full=True)
    _close(res.value, rw, 1e-4, "wall")
    t = (np.arange(256) + 0.5) * 10 / 256
    assert res.weights[t > 2.1].sum() < 1e-4


@check("volume")
def composite_matches_loop(ctx):
    rng = ctx.rng(23)
    sigma = rng.uniform(0, 2, (5, 40))
    rad = rng.normal(size=(5, 40, 3))
    delta = np.full(40, 0.25)
    out, w, tf = composite(sigma, rad, delta)
    for i in range(5):
        ref, wsum, t = oracles.loop_composite(sigma[i], rad[i], delta)
        _close(out[i], ref, 1e-9, "composite")
        assert abs(w[i].sum() - wsum) < 1e-9 and abs(w[i].sum() - (1 - tf[i])) < 1e-9


@check("volume")
def panorama_views_match_single_renders(ctx):
    rng = ctx.rng(33)
    field = FeatureField(_feature_cloud(rng, dim=ctx.nets.feature_dim), ctx.nets)
    intr = CameraIntrinsics.from_hfov(3, 3, math.radians(90))
    pano = render_panorama((0.1, 0, -0.1), field, intr=intr, start_yaw=0.2)
    assert len(pano.maps) == 12
    for k in (0, 5, 11):
        yaw = 0.2 + k * math.radians(30)
        assert abs(pano.yaws[k] - yaw) < 1e-12
        _close(pano[k], render_feature_view(Pose.from_yaw(yaw, (0.1, 0, -0.1)), intr, field), 1e-12, "view")


@check("volume")
def direction_encoding_yaw_invariant(ctx):
    rng = ctx.rng(34)
    theta, w = rng.uniform(-np.pi, np.pi, 9), rng.dirichlet(np.ones(9))
    a = direction_encoding(theta, w, 0.3)
    b = direction_encoding(theta + 1.1, w, 1.4)
    _close(a, b, 1e-12, "encoding")
    want = [sum(wk * math.cos(t - 0.3) for wk, t in zip(w, theta)),
            sum(wk * math.sin(t - 0.3) for wk, t in zip(w, theta))]
    _close(a, want, 1e-12, "loop")


@check("volume")
def ring_panorama_symmetry(ctx):
    n, dim = 12, ctx.nets.feature_dim
    ang = np.arange(n) * (2 * np.pi / n)
    pos = np.stack([3 * np.sin(ang), np.zeros(n), 3 * np.cos(ang)], axis=1)
    feats = np.tile(np.linspace(-1, 1, dim), (n, 1))
    cloud = FeatureCloudM(dim, pos, feats, ang, np.full(n, 0.2))
    field = FeatureField(cloud, ctx.nets)
    pano = render_panorama((0, 0, 0), field, intr=CameraIntrinsics.from_hfov(4, 4, math.radians(90)))
    assert np.abs(pano[0]).max() > 1e-3, "ring is invisible"
    for k in range(1, 12):
        _close(pano[k], pano[0], 1e-6, "view %d" % k)


@check("volume")
def empty_cloud_renders_zero(ctx):
    field = FeatureField(FeatureCloudM(ctx.nets.feature_dim), ctx.nets)
    fmap = render_feature_view(Pose.identity(), CameraIntrinsics.from_hfov(3, 3, 1.0), field)
    assert not fmap.any()


# -- fusion and scoring --------------------------------------------------------------

def _small_attention(rng, d=24, heads=4, patch=4, cin=3, cfeat=5):
    enc_i = PatchEncoder(patch, random_mlp(rng, [patch * patch * cin, d], ["tanh"]))
    enc_f = PatchEncoder(patch, random_mlp(rng, [patch * patch * cfeat, d], ["tanh"]))
    att = AttentionWeights(*(rng.normal(0, 0.3, (d, d)) for _ in range(4)), heads=heads)
    return enc_i, enc_f, att


@check("fusion")
def fuse_singleton_tokens(ctx):
    rng = ctx.rng(24)
    enc_i, enc_f, att = _small_attention(rng)
    img, fmap = rng.uniform(0, 1, (4, 4, 3)), rng.normal(size=(4, 4, 5))
    got = fuse_stu(img, fmap, enc_i, enc_f, att)
    v = enc_f.tokens(fmap)[0]
    _close(got, att.wo @ (att.wv @ v), 1e-9, "singleton")


@check("fusion")
def fuse_key_permutation(ctx):
    rng = ctx.rng(25)
    enc_i, enc_f, att = _small_attention(rng)
    img, fmap = rng.uniform(0, 1, (8, 8, 3)), rng.normal(size=(8, 8, 5))
    a = fuse_stu(img, fmap, enc_i, enc_f, att)
    # swapping patch blocks permutes the key/value tokens
    swapped = fmap.copy()
    swapped[:4, :4], swapped[4:, 4:] = fmap[4:, 4:], fmap[:4, :4]
    _close(fuse_stu(img, swapped, enc_i, enc_f, att), a, 1e-9, "permutation")


@check("fusion")
def scoring_matches_hand_argmax(ctx):
    rng = ctx.rng(26)
    ffn = random_mlp(rng, [8, 6, 1], ["relu", "none"])
    for _ in range(50):
        nc, nf = rng.integers(1, 5), rng.integers(0, 5)
        emb = rng.normal(size=(nc + nf, 8))
        visited = rng.uniform(size=nc + nf) < 0.3
        if visited.all():
            visited[-1] = False
        res = score_paths(NodeSet(emb[:nc], emb[nc:], visited), ffn)
        raw = [oracles.loop_mlp(ffn, e)[0] for e in emb]
        best = max((s, -i) for i, s in enumerate(raw) if not visited[i])
        assert res.index == -best[1] and not visited[res.index]


# -- losses ------------------------------------------------------------------------

@check("losses")
def l1_l2_loop_oracle(ctx):
    rng = ctx.rng(27)
    a, b = rng.uniform(size=(6, 5, 3)), rng.uniform(size=(6, 5, 3))
    diffs = [float(x - y) for x, y in zip(a.ravel(), b.ravel())]
    assert abs(l1_loss(a, b) - sum(abs(d) for d in diffs) / len(diffs)) < 1e-9
    assert abs(l2_loss(a, b) - sum(d * d for d in diffs) / len(diffs)) < 1e-9


@check("losses")
def ssim_identity_and_checkerboard(ctx):
    rng = ctx.rng(28)
    x = rng.uniform(size=(16, 16))
    assert abs(ssim(x, x) - 1) < 1e-9
    cb = (np.indices((16, 16)).sum(0) % 2).astype(float)
    s = ssim(cb, 1 - cb)
    assert s < 0 and abs(s - oracles.loop_ssim(cb, 1 - cb)) < 1e-9


@check("losses")
def ssim_constant_closed_form(ctx):
    a, b = np.full((12, 12), 0.3), np.full((12, 12), 0.55)
    c1 = 0.01 ** 2
    want = (2 * 0.3 * 0.55 + c1) / (0.3 ** 2 + 0.55 ** 2 + c1)
    assert abs(ssim(a, b) - want) < 1e-9


@check("losses")
def cross_entropy_loop_oracle(ctx):
    rng = ctx.rng(29)
    for _ in range(20):
        s = rng.normal(size=7) * 3
        t = rng.dirichlet(np.ones(7))
        assert abs(nav_ce_loss(s, t) - oracles.loop_cross_entropy(s, t)) < 1e-9
    assert abs(nav_ce_loss(np.zeros(9), np.full(9, 1 / 9)) - math.log(9)) < 1e-9


@check("losses")
def cross_entropy_gradient(ctx):
    rng = ctx.rng(30)
    s, t = rng.normal(size=6), rng.dirichlet(np.ones(6))
    res = finite_diff_check(lambda v: nav_ce_loss(v, t), s, nav_ce_grad(s, t))
    assert res.max_rel_error < 1e-4, res.max_rel_error


@check("losses")
def pretrain_total_recomposition(ctx):
    rng = ctx.rng(31)
    img, gt = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    f, fg = rng.normal(size=32), rng.normal(size=32)
    parts = PretrainParts(l1_loss(img, gt), l2_loss(img, gt), ssim_loss(img, gt), cosine_feature_loss(f, fg))
    manual = parts.l1_r + parts.l2_r + parts.ssim_r + parts.l2_f
    assert abs(pretrain_total(parts) - manual) < 1e-12


@check("losses")
def psnr_loop_oracle(ctx):
    rng = ctx.rng(32)
    a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    assert abs(psnr(a, b) - oracles.loop_psnr(a, b)) < 1e-9
    assert psnr(a, a) == math.inf


def run_checks(nets: Optional[NetBundle] = None, seed: int = 0, tmpdir: Optional[str] = None,
               only: Optional[str] = None) -> List[CheckResult]:
    import tempfile
    own = None
    if tmpdir is None:
        own = tempfile.TemporaryDirectory()
        tmpdir = own.name
    ctx = Ctx(nets or default_bundle(seed), seed, tmpdir)
    results = []
    try:
        for group, name, fn in CHECKS:
            if only and only not in (group, name):
                continue
            t0 = time.perf_counter()
            try:
                fn(ctx)
                results.append(CheckResult(group, name, True, time.perf_counter() - t0))
            except Exception as exc:  # a failing check must not abort the suite
                msg = "%s: %s" % (type(exc).__name__, exc)
                if not isinstance(exc, AssertionError):
                    msg += "\n" + traceback.format_exc(limit=3)
                results.append(CheckResult(group, name, False, time.perf_counter() - t0, msg))
    finally:
        if own is not None:
            own.cleanup()
    return results


def junit_xml(results: List[CheckResult], suite: str = "npr-verify") -> str:
    fails = sum(not r.ok for r in results)
    root = ET.Element("testsuite", name=suite, tests=str(len(results)), failures=str(fails),
                      errors="0", time="%.3f" % sum(r.seconds for r in results))
    for r in results:
        case = ET.SubElement(root, "testcase", classname="npr.verify." + r.group, name=r.name,
                             time="%.4f" % r.seconds)
        if not r.ok:
            ET.SubElement(case, "failure", message=r.message.splitlines()[0] if r.message else "failed").text = \
                r.message
    return ET.tostring(root, encoding="unicode")
