import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npr import oracles
from npr.errors import BadMagic, BehindCamera, CorruptLength, CountMismatch
from npr.geometry import CameraIntrinsics, Pose, project_point
from npr.splat import (GaussianSet, SplatConfig, covariance3d, make_gaussians, naive_rasterize, pixel_trace,
                       project_covariance, rasterize, read_fmap, read_ppm, write_fmap, write_ppm)
from npr.stq import SelectedPoints

from conftest import random_pose


def random_splats(rng, n, channels=3, depth=(2, 5)):
    pos = np.c_[rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(*depth, n)]
    return GaussianSet(pos, rng.normal(size=(n, 4)), rng.uniform(0.02, 0.3, (n, 3)),
                       rng.uniform(0.1, 0.99, n), rng.uniform(0, 1, (n, channels)))


def permuted(gs, p):
    return GaussianSet(gs.positions[p], gs.rotations[p], gs.scales[p], gs.opacities[p], gs.payload[p])


# -- primitives ------------------------------------------------------------------------

def test_make_gaussians_share_geometry(nets, rng):
    n = 7
    sel = SelectedPoints(rng.normal(size=(n, 3)), rng.uniform(0, 1, (n, 3)), np.arange(n))
    desc = rng.normal(size=(n, nets.descriptor.out_dim))
    g_img, g_feat = make_gaussians(sel, desc, nets.heads)
    assert len(g_img) == len(g_feat) == n
    assert g_img.channels == 3 and g_feat.channels == desc.shape[1]
    for f in ("positions", "rotations", "scales", "opacities"):
        assert np.array_equal(getattr(g_img, f), getattr(g_feat, f))
    assert np.allclose(np.linalg.norm(g_img.rotations, axis=1), 1.0, atol=1e-12)
    assert np.all((g_img.opacities > 0) & (g_img.opacities < 1))


def test_make_gaussians_empty_and_mismatch(nets):
    d = nets.descriptor.out_dim
    sel = SelectedPoints(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))
    g_img, g_feat = make_gaussians(sel, np.zeros((0, d)), nets.heads)
    assert len(g_img) == len(g_feat) == 0
    with pytest.raises(CountMismatch):
        make_gaussians(SelectedPoints(np.zeros((2, 3)), np.zeros((2, 3)), np.arange(2)), np.zeros((3, d)), nets.heads)


def test_gaussian_set_length_mismatch():
    with pytest.raises(CountMismatch):
        GaussianSet(np.zeros((2, 3)), np.zeros((1, 4)), np.zeros((2, 3)), np.zeros(2), np.zeros((2, 3)))


def test_covariance_identity_rotation():
    assert np.allclose(covariance3d([1, 0, 0, 0], [1, 2, 3]), np.diag([1, 4, 9]), atol=1e-15)


def test_covariance_quarter_turn_about_z():
    q = [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)]
    assert np.allclose(covariance3d(q, [1, 2, 3]), np.diag([4, 1, 9]), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3),
       st.lists(st.floats(1e-3, 3), min_size=3, max_size=3))
def test_covariance_eigenvalues_are_squared_scales(q, s):
    cov = covariance3d(q, s)
    assert np.allclose(cov, cov.T, atol=1e-14)
    assert np.allclose(np.linalg.eigvalsh(cov), np.sort(np.square(s)), atol=1e-9)


@pytest.mark.parametrize("z", [1.0, 2.0, 4.0, 8.0])
def test_on_axis_projection_closed_form(intr224, z):
    s = 0.15
    cov2 = project_covariance(s * s * np.eye(3), Pose.identity(), intr224, [0, 0, z], dilation=0.0)
    want = (intr224.fx * s / z) ** 2
    assert np.allclose(cov2, np.diag([want, want]), atol=1e-9)


def test_projected_size_inverse_square_in_depth(intr224):
    cov = covariance3d([1, 0, 0, 0], [0.1, 0.2, 0.05])
    a = project_covariance(cov, Pose.identity(), intr224, [0, 0, 2.0], dilation=0.0)
    b = project_covariance(cov, Pose.identity(), intr224, [0, 0, 4.0], dilation=0.0)
    assert np.allclose(a, 4.0 * b, rtol=1e-12)


def test_dilation_adds_to_diagonal(intr224):
    cov = covariance3d([1, 0, 0, 0], [0.1, 0.2, 0.05])
    a = project_covariance(cov, Pose.identity(), intr224, [0.3, -0.2, 3.0], dilation=0.0)
    b = project_covariance(cov, Pose.identity(), intr224, [0.3, -0.2, 3.0], dilation=0.3)
    assert np.allclose(b - a, 0.3 * np.eye(2), atol=1e-12)


def test_projection_behind_camera(intr224):
    with pytest.raises(BehindCamera):
        project_covariance(np.eye(3), Pose.identity(), intr224, [0, 0, -1.0])


def test_projected_covariance_matches_numeric_jacobian(rng, intr224):
    for _ in range(20):
        pose = random_pose(rng)
        mean = pose.camera_to_world(np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 6)]))
        cov = covariance3d(rng.normal(size=4), rng.uniform(0.05, 0.5, 3))
        got = project_covariance(cov, pose, intr224, mean, dilation=0.0)

        def pix(p):
            (h, w), _ = project_point(intr224, pose, p)
            return np.array([w, h])
        J = oracles.numeric_jacobian(pix, mean, 1e-5)
        ref = J @ cov @ J.T
        assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-6


# -- rasterizer ------------------------------------------------------------------------

@pytest.mark.parametrize("tile", [4, 16, 64])
def test_tile_matches_naive_exact(rng, kernels, tile):
    gs = random_splats(rng, 60)
    intr = CameraIntrinsics.from_hfov(48, 40, math.radians(80))
    bg = rng.uniform(0, 1, 3)
    a = rasterize(gs, Pose.identity(), intr, bg, cfg=SplatConfig.exact(tile), kernels=kernels)
    b = naive_rasterize(gs, Pose.identity(), intr, bg)
    assert np.max(np.abs(a.pixels - b.pixels)) < 1e-9
    assert np.max(np.abs(a.alpha - b.alpha)) < 1e-9
    assert np.max(np.abs(a.depth_hint - b.depth_hint)) < 1e-9


def test_tile_matches_naive_random_pose(rng, kernels):
    pose = random_pose(rng)
    gs = random_splats(rng, 80)
    gs.positions = pose.camera_to_world(gs.positions)
    intr = CameraIntrinsics.from_hfov(40, 40, math.radians(90))
    a = rasterize(gs, pose, intr, cfg=SplatConfig.exact(), kernels=kernels)
    b = naive_rasterize(gs, pose, intr)
    assert np.max(np.abs(a.pixels - b.pixels)) < 1e-9


def test_default_config_close_to_naive(rng, kernels):
    gs = random_splats(rng, 60)
    intr = CameraIntrinsics.from_hfov(48, 48, math.radians(80))
    a = rasterize(gs, Pose.identity(), intr, kernels=kernels)
    b = naive_rasterize(gs, Pose.identity(), intr, dilation=SplatConfig().dilation)
    # alpha_min, 3-sigma culling and early stop each drop contributions below a few 1e-3
    assert np.max(np.abs(a.pixels - b.pixels)) < 2e-2


def test_backends_agree(rng):
    from npr._backend import available_backends
    ks = available_backends()
    if len(ks) < 2:
        pytest.skip("compiled kernels not built")
    gs = random_splats(rng, 200)
    intr = CameraIntrinsics.from_hfov(64, 48, math.radians(90))
    outs = [rasterize(gs, Pose.identity(), intr, kernels=k) for k in ks.values()]
    assert all(np.max(np.abs(o.pixels - outs[0].pixels)) < 1e-12 for o in outs)


def test_two_gaussian_hand_case(kernels):
    intr = CameraIntrinsics(2, 2, 2.0, 2.0, 1.5, 1.5)
    c1, c2, bg = np.array([1.0, 0.2, 0.0]), np.array([0.0, 0.5, 1.0]), np.array([0.3, 0.3, 0.3])
    gs = GaussianSet(np.array([[0, 0, 2.0], [0, 0, 3.0]]), np.array([[1.0, 0, 0, 0]] * 2),
                     np.full((2, 3), 0.1), np.array([0.5, 0.5]), np.stack([c1, c2]))
    out = rasterize(gs, Pose.identity(), intr, bg, cfg=SplatConfig.exact(), kernels=kernels)
    assert np.max(np.abs(out.pixels[1, 1] - (0.5 * c1 + 0.25 * c2 + 0.25 * bg))) < 1e-9
    assert abs(out.alpha[1, 1] - 0.75) < 1e-12
    # depth order, not input order, decides the blend
    swapped = rasterize(permuted(gs, [1, 0]), Pose.identity(), intr, bg, cfg=SplatConfig.exact(), kernels=kernels)
    assert np.array_equal(swapped.pixels, out.pixels)


def test_single_gaussian_closed_form(rng, kernels):
    intr = CameraIntrinsics.from_hfov(32, 32, math.radians(60))
    gs = GaussianSet(np.array([[0.1, -0.05, 2.5]]), rng.normal(size=(1, 4)), np.array([[0.1, 0.05, 0.08]]),
                     np.array([0.8]), np.array([[0.2, 0.6, 1.0]]))
    out = rasterize(gs, Pose.identity(), intr, cfg=SplatConfig.exact(), kernels=kernels)
    cov2 = project_covariance(covariance3d(gs.rotations[0], gs.scales[0]), Pose.identity(), intr,
                              gs.positions[0], dilation=0.0)
    (h0, w0), _ = project_point(intr, Pose.identity(), gs.positions[0])
    inv = np.linalg.inv(cov2)
    for h in range(32):
        for w in range(32):
            d = np.array([w + 0.5 - w0, h + 0.5 - h0])
            a = 0.8 * math.exp(-0.5 * d @ inv @ d)
            assert abs(out.alpha[h, w] - a) < 1e-12
            assert np.allclose(out.pixels[h, w], a * gs.payload[0], atol=1e-12)


def test_opaque_front_splat_hides_background(kernels):
    intr = CameraIntrinsics(3, 3, 3.0, 3.0, 1.5, 1.5)
    gs = GaussianSet(np.array([[0, 0, 2.0], [0, 0, 3.0]]), np.array([[1.0, 0, 0, 0]] * 2),
                     np.full((2, 3), 0.1), np.array([np.nextafter(1.0, 0.0), 0.9]),
                     np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    out = rasterize(gs, Pose.identity(), intr, [0, 0, 1.0], cfg=SplatConfig.exact(), kernels=kernels)
    assert np.allclose(out.pixels[1, 1], [1, 0, 0], atol=1e-12)


def test_empty_set_is_background(kernels):
    intr = CameraIntrinsics.from_hfov(8, 6, math.radians(90))
    out = rasterize(GaussianSet.empty(3), Pose.identity(), intr, [0.1, 0.2, 0.3], kernels=kernels)
    assert out.pixels.shape == (6, 8, 3)
    assert np.all(out.pixels == [0.1, 0.2, 0.3]) and np.all(out.alpha == 0)


def test_splats_behind_camera_are_skipped(rng, kernels):
    gs = random_splats(rng, 20, depth=(-5, -1))
    out = rasterize(gs, Pose.identity(), CameraIntrinsics.from_hfov(16, 16, math.radians(90)), kernels=kernels)
    assert np.all(out.alpha == 0) and out.stats["behind"] == 20


def test_input_order_invariance(rng, kernels):
    gs = random_splats(rng, 80)
    intr = CameraIntrinsics.from_hfov(40, 40, math.radians(80))
    a = rasterize(gs, Pose.identity(), intr, kernels=kernels)
    b = rasterize(permuted(gs, rng.permutation(80)), Pose.identity(), intr, kernels=kernels)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.alpha, b.alpha)


def test_equal_depth_ties_break_by_index(kernels):
    intr = CameraIntrinsics(2, 2, 2.0, 2.0, 1.5, 1.5)
    gs = GaussianSet(np.array([[0, 0, 2.0], [0, 0, 2.0]]), np.array([[1.0, 0, 0, 0]] * 2),
                     np.full((2, 3), 0.1), np.array([0.5, 0.5]), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    out = rasterize(gs, Pose.identity(), intr, cfg=SplatConfig.exact(), kernels=kernels)
    assert np.allclose(out.pixels[1, 1], [0.5, 0.25, 0], atol=1e-12)


def test_image_and_feature_alpha_identical(rng, kernels):
    gs = random_splats(rng, 50)
    gf = GaussianSet(gs.positions, gs.rotations, gs.scales, gs.opacities, rng.normal(size=(50, 16)))
    intr = CameraIntrinsics.from_hfov(32, 32, math.radians(80))
    a = rasterize(gs, Pose.identity(), intr, kernels=kernels)
    b = rasterize(gf, Pose.identity(), intr, kernels=kernels)
    assert np.array_equal(a.alpha, b.alpha)


def test_output_in_convex_hull_of_payload_and_background(rng, kernels):
    gs = random_splats(rng, 100)
    bg = np.array([0.5, 0.5, 0.5])
    out = rasterize(gs, Pose.identity(), CameraIntrinsics.from_hfov(32, 32, math.radians(90)), bg, kernels=kernels)
    lo = np.minimum(gs.payload.min(0), bg)
    hi = np.maximum(gs.payload.max(0), bg)
    assert np.all(out.pixels >= lo - 1e-12) and np.all(out.pixels <= hi + 1e-12)
    assert np.all((out.alpha >= 0) & (out.alpha <= 1))


def test_threads_bit_identical(rng, kernels):
    gs = random_splats(rng, 300)
    intr = CameraIntrinsics.from_hfov(64, 64, math.radians(90))
    a = rasterize(gs, Pose.identity(), intr, kernels=kernels, threads=1)
    b = rasterize(gs, Pose.identity(), intr, kernels=kernels, threads=4)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.alpha, b.alpha)


def test_far_outside_view_is_culled(rng):
    gs = random_splats(rng, 5)
    gs.positions[:, 0] += 100.0
    out = rasterize(gs, Pose.identity(), CameraIntrinsics.from_hfov(16, 16, math.radians(90)))
    assert out.stats["outside"] == 5 and np.all(out.alpha == 0)


# -- pixel traces ----------------------------------------------------------------------

def test_pixel_trace_conservation(rng):
    gs = random_splats(rng, 150)
    intr = CameraIntrinsics.from_hfov(48, 48, math.radians(90))
    cfg = SplatConfig()
    out = rasterize(gs, Pose.identity(), intr, cfg=cfg)
    for _ in range(200):
        h, w = rng.integers(0, 48, 2)
        tr = pixel_trace(gs, Pose.identity(), intr, h, w, cfg)
        assert tr.transmittance[0] == 1.0
        assert np.all(np.diff(tr.transmittance) <= 0)
        assert np.all((tr.alphas >= 0) & (tr.alphas <= 1))
        assert abs((1 - tr.transmittance[-1]) - out.alpha[h, w]) < 1e-12


def test_pixel_trace_exact_matches_naive(rng):
    gs = random_splats(rng, 40)
    intr = CameraIntrinsics.from_hfov(24, 24, math.radians(90))
    ref = naive_rasterize(gs, Pose.identity(), intr)
    tr = pixel_trace(gs, Pose.identity(), intr, 12, 11, SplatConfig.exact())
    assert abs(1 - tr.transmittance[-1] - ref.alpha[12, 11]) < 1e-12
    assert np.all(np.diff(gs.positions[tr.ids, 2]) >= 0)


def test_pixel_trace_empty():
    tr = pixel_trace(GaussianSet.empty(), Pose.identity(), CameraIntrinsics.from_hfov(4, 4, 1.0), 0, 0)
    assert len(tr.ids) == 0 and tr.transmittance.tolist() == [1.0]


# -- files -----------------------------------------------------------------------------

def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    assert np.allclose(read_ppm(tmp_path / "a.ppm"), img, atol=1e-12)


def test_ppm_clips(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.array([[[-1.0, 0.5, 2.0]]]))
    assert np.allclose(read_ppm(tmp_path / "a.ppm"), [[[0.0, 128 / 255, 1.0]]])


def test_ppm_errors(tmp_path):
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "a.ppm", np.zeros((2, 2)))
    (tmp_path / "b.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(BadMagic):
        read_ppm(tmp_path / "b.ppm")
    (tmp_path / "c.ppm").write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
    with pytest.raises(CorruptLength):
        read_ppm(tmp_path / "c.ppm")


def test_fmap_roundtrip_and_errors(tmp_path, rng):
    m = rng.normal(size=(3, 4, 5)).astype(np.float32)
    write_fmap(tmp_path / "m.fmap", m)
    assert np.array_equal(read_fmap(tmp_path / "m.fmap"), m)
    write_fmap(tmp_path / "g.fmap", m[..., 0])
    assert read_fmap(tmp_path / "g.fmap").shape == (3, 4, 1)
    blob = (tmp_path / "m.fmap").read_bytes()
    (tmp_path / "t.fmap").write_bytes(blob[:-4])
    with pytest.raises(CorruptLength):
        read_fmap(tmp_path / "t.fmap")
    (tmp_path / "x.fmap").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(BadMagic):
        read_fmap(tmp_path / "x.fmap")
