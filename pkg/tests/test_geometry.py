import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npr import oracles
from npr.errors import BehindCamera, NonPositiveDepth, PixelOutOfBounds, ZeroQuaternion
from npr.geometry import (CameraIntrinsics, Pose, camera_rays, project_point, project_points, quat_to_matrix,
                          quats_to_matrices, unproject_depth_map, unproject_pixel, wrap_angle)

from conftest import random_pose

finite = st.floats(-1e3, 1e3, allow_nan=False)
quats = st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4).filter(
    lambda q: sum(v * v for v in q) > 1e-6)


def test_focal_length_for_224_px_at_90_degrees(intr224):
    assert intr224.fx == 112.0 and intr224.fy == 112.0
    assert (intr224.cx, intr224.cy) == (112.0, 112.0)


def test_hfov_out_of_range_rejected():
    with pytest.raises(ValueError):
        CameraIntrinsics.from_hfov(10, 10, math.pi)


def test_principal_point_unprojects_to_optical_axis(intr224):
    np.testing.assert_allclose(unproject_pixel(intr224, Pose.identity(), (112.0, 112.0), 2.0), [0, 0, 2.0])


def test_optical_axis_projects_to_principal_point(intr224):
    (h, w), z = project_point(intr224, Pose.identity(), [0, 0, 5.0])
    assert (h, w, z) == (112.0, 112.0, 5.0)


def test_behind_camera():
    with pytest.raises(BehindCamera):
        project_point(CameraIntrinsics.from_hfov(8, 8, 1.0), Pose.identity(), [0, 0, -1.0])


@pytest.mark.parametrize("depth", [0.0, -1.0, float("nan")])
def test_non_positive_depth(intr224, depth):
    with pytest.raises(NonPositiveDepth):
        unproject_pixel(intr224, Pose.identity(), (10, 10), depth)


@pytest.mark.parametrize("pixel", [(-0.1, 5), (5, 224.5), (300, 3)])
def test_pixel_out_of_bounds(intr224, pixel):
    with pytest.raises(PixelOutOfBounds):
        unproject_pixel(intr224, Pose.identity(), pixel, 1.0)


def test_round_trip_1000_random_triples(intr224, rng):
    worst = 0.0
    for _ in range(1000):
        pose = random_pose(rng)
        px = rng.uniform([0, 0], [224, 224])
        d = rng.uniform(0.05, 20)
        (h, w), z = project_point(intr224, pose, unproject_pixel(intr224, pose, px, d))
        worst = max(worst, abs(h - px[0]), abs(w - px[1]))
        assert z == pytest.approx(d, rel=1e-12)
    assert worst < 1e-6


def test_projection_matches_matrix_pipeline(intr224, rng):
    for _ in range(300):
        pose = random_pose(rng)
        p = pose.camera_to_world(rng.uniform([-3, -3, 0.2], [3, 3, 9]))
        (h, w), z = project_point(intr224, pose, p)
        ref, zr = oracles.matrix_project(intr224, pose, p)
        assert max(abs(h - ref[0]), abs(w - ref[1])) < 1e-9
        assert z == pytest.approx(zr, abs=1e-9)


def test_vectorized_projection_matches_scalar(intr224, rng):
    pose = random_pose(rng)
    pts = pose.camera_to_world(rng.uniform([-2, -2, 1], [2, 2, 6], (50, 3)))
    pix, z = project_points(intr224, pose, pts)
    for i, p in enumerate(pts):
        (h, w), zi = project_point(intr224, pose, p)
        np.testing.assert_allclose(pix[i], [h, w], atol=1e-9)
        assert z[i] == pytest.approx(zi)


def test_center_ray_and_unit_directions():
    intr = CameraIntrinsics.from_hfov(5, 5, math.radians(60))
    rays = camera_rays(intr, Pose.identity())
    np.testing.assert_allclose(rays.directions[2, 2], [0, 0, 1], atol=1e-15)
    assert np.all(np.abs(np.linalg.norm(rays.directions, axis=-1) - 1) < 1e-9)


def test_corner_pixel_ray_angle():
    intr = CameraIntrinsics.from_hfov(64, 48, math.radians(70))
    d = camera_rays(intr, Pose.identity()).directions[0, 0]
    want = math.atan(math.hypot((intr.width / 2 - 0.5) / intr.fx, (intr.height / 2 - 0.5) / intr.fy))
    assert abs(math.acos(d[2]) - want) < 1e-9


def test_image_corner_angle_closed_form():
    intr = CameraIntrinsics.from_hfov(64, 48, math.radians(70))
    p = unproject_pixel(intr, Pose.identity(), (0.0, 0.0), 1.0)
    want = math.atan(math.sqrt((intr.width / (2 * intr.fx)) ** 2 + (intr.height / (2 * intr.fy)) ** 2))
    assert abs(math.acos(p[2] / np.linalg.norm(p)) - want) < 1e-9


def test_ray_consistency_with_unprojection(rng):
    intr = CameraIntrinsics.from_hfov(16, 12, math.radians(80))
    pose = random_pose(rng)
    rays = camera_rays(intr, pose)
    depth = rng.uniform(0.5, 5, (12, 16))
    pts = unproject_depth_map(intr, pose, depth)
    fwd = pose.R[:, 2]
    dist = depth / (rays.directions @ fwd)  # metric distance along the ray for a camera-z depth
    np.testing.assert_allclose(rays.origins + dist[..., None] * rays.directions, pts, atol=1e-9)
    for h, w in [(0, 0), (5, 7), (11, 15)]:
        np.testing.assert_allclose(pts[h, w], unproject_pixel(intr, pose, (h + 0.5, w + 0.5), depth[h, w]),
                                   atol=1e-12)


def test_textbook_quaternions():
    np.testing.assert_array_equal(quat_to_matrix([1, 0, 0, 0]), np.eye(3))
    r = math.sqrt(0.5)
    np.testing.assert_allclose(quat_to_matrix([r, 0, 0, r]), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_zero_quaternion():
    with pytest.raises(ZeroQuaternion):
        quat_to_matrix([0, 0, 0, 0])
    with pytest.raises(ZeroQuaternion):
        quats_to_matrices(np.zeros((2, 4)))


@given(quats)
def test_quaternion_orthonormal_and_sign_invariant(q):
    R = quat_to_matrix(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9
    assert np.array_equal(R, quat_to_matrix(-np.asarray(q)))


@given(st.lists(quats, min_size=1, max_size=6))
def test_vectorized_quaternions_match_scalar(qs):
    M = quats_to_matrices(np.array(qs))
    for q, m in zip(qs, M):
        np.testing.assert_allclose(m, quat_to_matrix(q), atol=1e-12)


@settings(max_examples=200)
@given(st.floats(0.0, 224.0), st.floats(0.0, 224.0), st.floats(0.05, 100.0), quats,
       st.tuples(finite, finite, finite))
def test_round_trip_property(h, w, d, q, t):
    intr = CameraIntrinsics.from_hfov(224, 224, math.radians(90))
    pose = Pose(tuple(q), t)
    (h2, w2), z = project_point(intr, pose, unproject_pixel(intr, pose, (h, w), d))
    assert abs(h2 - h) < 1e-6 and abs(w2 - w) < 1e-6


def test_yaw_convention():
    pose = Pose.from_yaw(math.radians(30), (1, 2, 3))
    np.testing.assert_allclose(pose.R[:, 2], [0.5, 0, math.sqrt(3) / 2], atol=1e-15)
    assert pose.yaw == pytest.approx(math.radians(30))
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi) or wrap_angle(3 * math.pi) == pytest.approx(-math.pi)


def test_pose_json_round_trip(rng):
    pose = random_pose(rng)
    back = Pose.from_json(pose.to_json())
    np.testing.assert_array_equal(back.R, pose.R)
    np.testing.assert_array_equal(back.t, pose.t)
