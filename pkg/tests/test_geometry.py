import numpy as np
import pytest
from hypothesis import given, strategies as st

from nfct.geometry import (
    PoseSet,
    ProjectionPose,
    apply_pose,
    apply_pose_jacobians,
    nominal_view_angles,
    rotation_matrix,
    rotation_matrix_deriv,
    wrap_angle,
)

# cos(0.3), sin(0.3) frozen from a 40-digit mpmath evaluation
COS_03 = 0.9553364891256060196423102275680498982442
SIN_03 = 0.2955202066613395751053207456850273736778

angles = st.floats(-50.0, 50.0, allow_nan=False)


def test_rotation_identity():
    assert np.array_equal(rotation_matrix(0.0), np.eye(2))


def test_rotation_quarter_turn():
    R = rotation_matrix(np.pi / 2)
    assert np.allclose(R, [[0, -1], [1, 0]], atol=1e-15)


def test_rotation_vs_trig_oracle():
    R = rotation_matrix(0.3)
    expected = np.array([[COS_03, -SIN_03], [SIN_03, COS_03]])
    assert np.abs(R - expected).max() < 1e-15


def test_rotation_rejects_non_finite():
    with pytest.raises(ValueError):
        rotation_matrix(np.nan)
    with pytest.raises(ValueError):
        rotation_matrix(np.inf)


@given(angles)
def test_rotation_orthonormal_unit_det(theta):
    R = rotation_matrix(theta)
    assert np.abs(R.T @ R - np.eye(2)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_apply_pose_identity():
    pose = ProjectionPose(0.0, np.zeros(2))
    assert np.allclose(apply_pose(pose, np.array([0.4, -0.2])), [0.4, -0.2])


def test_apply_pose_quarter_turn():
    pose = ProjectionPose(np.pi / 2, np.zeros(2))
    assert np.allclose(apply_pose(pose, np.array([1.0, 0.0])), [0.0, 1.0], atol=1e-15)


@given(angles, st.floats(-1, 1), st.floats(-1, 1), st.floats(-2, 2), st.floats(-2, 2))
def test_apply_pose_roundtrip(theta, tx, ty, px, py):
    pose = ProjectionPose(theta, np.array([tx, ty]))
    p = np.array([px, py])
    q = apply_pose(pose, p)
    back = rotation_matrix(theta).T @ (q - pose.t)
    assert np.abs(back - p).max() < 1e-12


@given(angles, st.floats(-1, 1), st.floats(-1, 1))
def test_apply_pose_isometry(theta, tx, ty):
    pose = ProjectionPose(theta, np.array([tx, ty]))
    a = np.array([0.3, -0.7])
    b = np.array([-0.5, 0.2])
    da = apply_pose(pose, a) - apply_pose(pose, b)
    assert abs(np.linalg.norm(da) - np.linalg.norm(a - b)) < 1e-12


@given(angles, angles)
def test_rotation_composition(theta1, theta2):
    p = np.array([0.4, 0.3])
    p1 = apply_pose(ProjectionPose(theta2), apply_pose(ProjectionPose(theta1), p))
    p2 = apply_pose(ProjectionPose(theta1 + theta2), p)
    assert np.abs(p1 - p2).max() < 1e-9


def test_apply_pose_batch_shape():
    pose = ProjectionPose(0.4, np.array([0.1, 0.2]))
    pts = np.random.default_rng(0).normal(size=(7, 2))
    out = apply_pose(pose, pts)
    assert out.shape == (7, 2)
    for i in range(7):
        assert np.allclose(out[i], apply_pose(pose, pts[i]))


def test_jacobian_trivial_cases():
    pose = ProjectionPose(0.0, np.zeros(2))
    d_theta, d_t, d_p = apply_pose_jacobians(pose, np.array([1.0, 0.0]))
    assert np.allclose(d_theta, [0.0, 1.0])
    assert np.array_equal(d_t, np.eye(2))
    assert np.allclose(d_p, rotation_matrix(0.0))


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(20):
        theta = rng.uniform(-3, 3)
        t = rng.uniform(-1, 1, 2)
        p = rng.uniform(-1, 1, 2)
        pose = ProjectionPose(theta, t)
        d_theta, d_t, d_p = apply_pose_jacobians(pose, p)
        fd_theta = (
            apply_pose(ProjectionPose(theta + h, t), p)
            - apply_pose(ProjectionPose(theta - h, t), p)
        ) / (2 * h)
        assert np.abs(fd_theta - d_theta).max() <= 1e-6 * max(1.0, np.abs(fd_theta).max())
        for d in range(2):
            dt = np.zeros(2)
            dt[d] = h
            fd = (apply_pose(ProjectionPose(theta, t + dt), p)
                  - apply_pose(ProjectionPose(theta, t - dt), p)) / (2 * h)
            assert np.abs(fd - d_t[:, d]).max() <= 1e-6
            dp = np.zeros(2)
            dp[d] = h
            fd = (apply_pose(pose, p + dp) - apply_pose(pose, p - dp)) / (2 * h)
            assert np.abs(fd - d_p[:, d]).max() <= 1e-6


def test_rotation_deriv_is_derivative():
    h = 1e-7
    for theta in (0.0, 0.3, -1.2, 2.9):
        fd = (rotation_matrix(theta + h) - rotation_matrix(theta - h)) / (2 * h)
        assert np.abs(fd - rotation_matrix_deriv(theta)).max() < 1e-7


def test_wrap_angle():
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)
    assert wrap_angle(2 * np.pi + 0.25) == pytest.approx(0.25)


def test_pose_requires_finite():
    with pytest.raises(ValueError):
        ProjectionPose(np.nan, np.zeros(2))
    with pytest.raises(ValueError):
        ProjectionPose(0.0, np.array([np.inf, 0.0]))


def test_poseset_validation():
    angles = nominal_view_angles(4)
    poses = [ProjectionPose(a) for a in angles]
    ps = PoseSet(poses, angles)
    assert len(ps) == 4
    with pytest.raises(ValueError):
        PoseSet(poses[:3], angles)
    with pytest.raises(ValueError):
        PoseSet(poses, angles[::-1])
    with pytest.raises(ValueError):
        PoseSet(poses, angles + np.pi)  # outside [0, pi)


def test_nominal_angles_uniform():
    a = nominal_view_angles(6)
    assert a[0] == 0.0
    assert np.allclose(np.diff(a), np.pi / 6)
    assert a[-1] < np.pi
