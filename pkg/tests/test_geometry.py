import math

import numpy as np
import pytest

from errors import BehindCamera, GeometryError
from geometry import (
    CameraIntrinsics,
    PointCloud,
    SE3Pose,
    pixel_index,
    project,
    project_points,
    relative_error,
    se3_apply,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_log,
    unproject,
)


def random_pose(rng, t_scale=5.0):
    return SE3Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3) * t_scale)


def assert_pose_close(a, b, tol=1e-9):
    angle, dist = relative_error(a, b)
    assert angle < tol and dist < tol


def test_identity_composition():
    assert_pose_close(se3_compose(SE3Pose.identity(), SE3Pose.identity()), SE3Pose.identity())


def test_compose_matches_matrix_product():
    a = SE3Pose.from_rotvec([0.0, 0.0, math.pi / 2], [1.0, 0.0, 0.0])
    b = SE3Pose(translation=np.array([0.0, 1.0, 0.0]))
    c = se3_compose(a, b)
    np.testing.assert_allclose(c.translation, [0.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(c.matrix(), a.matrix() @ b.matrix(), atol=1e-12)
    assert abs(c.angle() - math.pi / 2) < 1e-12


def test_compose_with_inverse_is_identity(rng):
    for _ in range(20):
        p = random_pose(rng)
        assert_pose_close(se3_compose(p, se3_inverse(p)), SE3Pose.identity())
        assert_pose_close(se3_inverse(se3_inverse(p)), p)


def test_quaternion_stays_unit_norm(rng):
    p = SE3Pose.identity()
    for _ in range(200):
        p = se3_compose(p, random_pose(rng, 0.1))
        assert abs(np.linalg.norm(p.rotation) - 1.0) < 1e-9
    unnormalized = SE3Pose(np.array([2.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(unnormalized.rotation, [1.0, 0.0, 0.0, 0.0])


def test_apply_examples():
    np.testing.assert_allclose(se3_apply(SE3Pose.identity(), np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
    shift = SE3Pose(translation=np.array([0.0, 0.0, 5.0]))
    np.testing.assert_allclose(se3_apply(shift, np.zeros(3)), [0.0, 0.0, 5.0])
    rz = SE3Pose.from_rotvec([0.0, 0.0, math.pi / 2])
    np.testing.assert_allclose(se3_apply(rz, np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0], atol=1e-12)


def test_apply_of_composition(rng):
    for _ in range(20):
        a, b = random_pose(rng), random_pose(rng)
        x = rng.normal(size=(10, 3))
        np.testing.assert_allclose(se3_apply(se3_compose(a, b), x), se3_apply(a, se3_apply(b, x)), atol=1e-9)


def test_project_examples():
    K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
    assert project(K, [0.0, 0.0, 2.0]) == pytest.approx((50.0, 50.0, 2.0))
    assert project(K, [1.0, 0.0, 2.0]) == pytest.approx((100.0, 50.0, 2.0))
    with pytest.raises(BehindCamera):
        project(K, [0.0, 0.0, 0.0])


def test_unproject_inverts_project(rng):
    K = CameraIntrinsics(420.0, 410.0, 320.5, 240.5, 640, 480)
    for _ in range(20):
        x = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 20)])
        u, v, z = project(K, x)
        np.testing.assert_allclose(unproject(K, u, v, z), x, atol=1e-9)


def test_project_points_flags_points_behind():
    K = CameraIntrinsics(10.0, 10.0, 2.0, 2.0, 5, 5)
    uv, z, in_front = project_points(K, np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]))
    assert in_front.tolist() == [True, False]
    rows, cols, inside = pixel_index(K, uv)
    assert (rows[0], cols[0]) == (2, 2) and inside[0]


def test_pixel_index_rounds_to_nearest_center():
    K = CameraIntrinsics(10.0, 10.0, 0.0, 0.0, 4, 4)
    rows, cols, inside = pixel_index(K, np.array([[0.49, 1.5], [-0.5, 3.6]]))
    assert cols.tolist() == [0, 0]
    assert rows.tolist() == [2, 4]
    assert inside.tolist() == [True, False]


def test_exp_log_roundtrip(rng):
    for _ in range(20):
        xi = np.concatenate([rng.normal(size=3), rng.uniform(-1, 1, size=3)])
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


def test_invalid_inputs_are_rejected():
    with pytest.raises(GeometryError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0, 1, 1)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 0, 1)
    with pytest.raises(GeometryError):
        PointCloud(np.array([[0.0, np.nan, 1.0]]))
    with pytest.raises(GeometryError):
        SE3Pose(np.zeros(4))


def test_pose_arrays_are_read_only():
    p = SE3Pose.identity()
    with pytest.raises(ValueError):
        p.translation[0] = 1.0
