import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svhull.geometry import (
    BehindCameraError,
    CameraIntrinsics,
    Pose,
    RigidTransform,
    camera_to_pixel,
    euler_to_rotation,
    pose_to_transform,
    project_point,
    projection_pose_jacobian,
    random_pose,
    rotation_error,
    rotation_to_euler,
    translation_error,
)

angles = st.floats(-10.0, 10.0, allow_nan=False)


@pytest.fixture
def K100():
    return CameraIntrinsics(f=100.0, u0=64.0, v0=64.0)


def rot_x(a):
    return np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])


def rot_y(a):
    return np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])


def rot_z(a):
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


def axis_angle_deg(R):
    """Rotation angle from the axis-angle decomposition (via the skew part)."""
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2
    return np.degrees(np.arctan2(np.linalg.norm(w), (np.trace(R) - 1) / 2))


class TestEulerToRotation:
    def test_zero_is_identity(self):
        np.testing.assert_array_equal(euler_to_rotation(0, 0, 0), np.eye(3))

    def test_quarter_turn_about_x(self):
        R = euler_to_rotation(np.pi / 2, 0, 0)
        np.testing.assert_allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)

    def test_matches_hand_composition(self):
        R = euler_to_rotation(0.3, -0.2, 1.1)
        np.testing.assert_allclose(R, rot_z(1.1) @ rot_y(-0.2) @ rot_x(0.3), atol=1e-15)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    @given(angles, angles, angles)
    def test_always_orthonormal(self, a, b, c):
        R = euler_to_rotation(a, b, c)
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(R) - 1) < 1e-9

    def test_rotation_to_euler_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            th = rng.uniform([-3, -1.5, -3], [3, 1.5, 3])
            np.testing.assert_allclose(rotation_to_euler(euler_to_rotation(*th)), th, atol=1e-9)


class TestPoseToTransform:
    def test_centered(self):
        T = pose_to_transform(Pose(0, 0, 0, 0, 0, 2), CameraIntrinsics(100, 64, 64))
        np.testing.assert_allclose(T.t, [0, 0, 2])

    def test_offset(self):
        T = pose_to_transform(Pose(0, 0, 0, 50, 0, 2), CameraIntrinsics(100, 64, 64))
        np.testing.assert_allclose(T.t, [1, 0, 2])

    def test_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            Pose(0, 0, 0, 0, 0, 0.0)
        with pytest.raises(ValueError):
            Pose(0, 0, 0, 0, 0, -1.0)

    def test_origin_lands_on_offset(self, K100):
        p = Pose(0, 0, 0, 7.5, -3.25, 2.2)
        u, v, z = project_point(K100, pose_to_transform(p, K100), [0, 0, 0])
        assert (u, v) == pytest.approx((64 + 7.5, 64 - 3.25), abs=1e-12)

    @given(angles, angles, angles, st.floats(-30, 30), st.floats(-30, 30), st.floats(0.5, 5))
    def test_origin_invariant_any_rotation(self, a, b, c, tu, tv, tz):
        K = CameraIntrinsics(150.0, 64.0, 64.0)
        u, v, _ = project_point(K, pose_to_transform(Pose(a, b, c, tu, tv, tz), K), [0, 0, 0])
        assert u == pytest.approx(64 + tu, abs=1e-9)
        assert v == pytest.approx(64 + tv, abs=1e-9)

    def test_json_roundtrip(self):
        p = Pose(0.1, -0.2, 0.3, 1.5, -2.5, 2.25)
        d = json.loads(json.dumps(p.to_dict()))
        assert set(d) == {"theta", "tu", "tv", "tz"}
        assert Pose.from_dict(d) == p
        K = CameraIntrinsics(150.0, 64.0, 64.0)
        assert CameraIntrinsics.from_dict(json.loads(json.dumps(K.to_dict()))) == K


class TestProjectPoint:
    @pytest.fixture
    def T(self):
        return RigidTransform(np.eye(3), [0, 0, 2])

    def test_origin(self, K100, T):
        assert project_point(K100, T, [0, 0, 0]) == pytest.approx((64, 64, 2))

    def test_offset_point(self, K100, T):
        assert project_point(K100, T, [0.25, 0, 0]) == pytest.approx((76.5, 64, 2))

    def test_behind_camera(self, K100, T):
        with pytest.raises(BehindCameraError):
            project_point(K100, T, [0, 0, -2.1])

    @given(st.floats(0.01, 100), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 5))
    def test_scale_consistency(self, lam, x, y, z):
        K = CameraIntrinsics(150.0, 64.0, 64.0)
        P = np.array([x, y, z])
        np.testing.assert_allclose(camera_to_pixel(K, lam * P), camera_to_pixel(K, P), rtol=1e-12, atol=1e-9)


def fd_pixel_jacobian(K, p, X, h=1e-5):
    base = p.as_vector()
    J = np.zeros((2, 6))
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        up = project_point(K, pose_to_transform(Pose.from_vector(base + e), K), X)[:2]
        um = project_point(K, pose_to_transform(Pose.from_vector(base - e), K), X)[:2]
        J[:, i] = (np.array(up) - np.array(um)) / (2 * h)
    return J


class TestProjectionJacobian:
    def test_origin_offsets_have_unit_slope(self, K100):
        J = projection_pose_jacobian(K100, Pose(0, 0, 0, 0, 0, 2), [0, 0, 0])
        assert J[0, 3] == pytest.approx(1.0)
        assert J[1, 4] == pytest.approx(1.0)

    def test_depth_partial(self, K100):
        p = Pose(0, 0, 0, 0, 0, 2)
        J = projection_pose_jacobian(K100, p, [0.25, 0, 0])
        np.testing.assert_allclose(J[0, 5], fd_pixel_jacobian(K100, p, [0.25, 0, 0])[0, 5], rtol=1e-7)
        # u = 100 * 0.25 / tz + 64
        assert J[0, 5] == pytest.approx(-100 * 0.25 / 4)

    def test_matches_finite_differences_on_random_pairs(self):
        rng = np.random.default_rng(0)
        K = CameraIntrinsics(150.0, 64.0, 64.0)
        worst = 0.0
        for _ in range(100):
            p = Pose(*rng.uniform(-np.pi, np.pi, 3), *rng.uniform(-10, 10, 2), rng.uniform(2.0, 3.0))
            X = rng.uniform(-0.5, 0.5, 3)
            J = projection_pose_jacobian(K, p, X)
            N = fd_pixel_jacobian(K, p, X)
            scale = np.abs(N).max()
            worst = max(worst, np.max(np.abs(J - N) / np.maximum(np.maximum(np.abs(J), np.abs(N)), 1e-3 * scale)))
        assert worst < 1e-5

    def test_behind_camera(self, K100):
        with pytest.raises(BehindCameraError):
            projection_pose_jacobian(K100, Pose(0, 0, 0, 0, 0, 1), [0, 0, -2])


class TestRotationError:
    def test_identical(self):
        assert rotation_error(np.eye(3), np.eye(3)) == 0.0

    def test_quarter_turn(self):
        assert rotation_error(np.eye(3), rot_z(np.pi / 2)) == pytest.approx(90.0)

    def test_matches_axis_angle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            R1 = euler_to_rotation(*rng.uniform(-3, 3, 3))
            R2 = euler_to_rotation(*rng.uniform(-3, 3, 3))
            assert rotation_error(R1, R2) == pytest.approx(axis_angle_deg(R1.T @ R2), abs=1e-6)

    def test_symmetric_and_triangle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            A, B, C = (euler_to_rotation(*rng.uniform(-3, 3, 3)) for _ in range(3))
            assert rotation_error(A, B) == pytest.approx(rotation_error(B, A), abs=1e-9)
            assert rotation_error(A, C) <= rotation_error(A, B) + rotation_error(B, C) + 1e-6

    def test_range(self):
        assert rotation_error(np.eye(3), rot_x(np.pi)) == pytest.approx(180.0)


class TestTranslationError:
    def test_zero(self):
        assert translation_error([0, 0, 2], [0, 0, 2]) == 0.0

    def test_five_percent(self):
        assert translation_error([0, 0, 2.1], [0, 0, 2]) == pytest.approx(5.0)

    def test_constructed_perturbation(self):
        rng = np.random.default_rng(4)
        t = rng.normal(size=3)
        d = rng.normal(size=3)
        d *= 0.03 * np.linalg.norm(t) / np.linalg.norm(d)
        assert translation_error(t + d, t) == pytest.approx(3.0, abs=1e-9)

    def test_rejects_zero_gt(self):
        with pytest.raises(ValueError):
            translation_error([1, 0, 0], [0, 0, 0])


class TestRandomPose:
    def test_deterministic(self):
        assert random_pose(42) == random_pose(42)
        assert random_pose(42) != random_pose(43)

    def test_distance_range(self):
        for s in range(1000):
            assert 2.0 <= random_pose(s, distance=(2.0, 2.5)).tz <= 2.5

    def test_cube_stays_in_frame(self):
        K = CameraIntrinsics(150.0, 64.0, 64.0)
        corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
        for s in range(1000):
            T = pose_to_transform(random_pose(s), K)
            for X in corners:
                u, v, _ = project_point(K, T, X)
                assert 0 <= u <= 128 and 0 <= v <= 128

    def test_rejects_bad_ranges(self):
        with pytest.raises(ValueError):
            random_pose(0, distance=(2.0, 1.0))
        with pytest.raises(ValueError):
            random_pose(0, distance=(-1.0, 1.0))
