import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capslam.geometry import (
    DualQuaternion,
    NormalizationError,
    Pose,
    SingularRotationError,
    Twist,
    compose,
    dq_to_pose,
    exp_se3,
    invert,
    log_se3,
    pose_to_dq,
    random_pose,
    read_trajectory,
    so3_exp,
    so3_log,
    write_trajectory,
)


def rodrigues(axis, angle):
    # textbook form, independent of so3_exp
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.cos(angle) * np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * np.outer(a, a)


def pose_close(a, b, tol=1e-9):
    return np.max(np.abs(a.matrix() - b.matrix())) <= tol


poses = st.builds(
    lambda seed: random_pose(np.random.default_rng(seed)),
    st.integers(min_value=0, max_value=2**32 - 1),
)


def test_exp_zero_is_identity():
    assert pose_close(exp_se3(np.zeros(6)), Pose.identity(), 0.0)


def test_exp_quarter_turn_about_z():
    p = exp_se3([0, 0, np.pi / 2, 0, 0, 0])
    np.testing.assert_allclose(p.rotation, rodrigues([0, 0, 1], np.pi / 2), atol=1e-15)
    np.testing.assert_allclose(p.translation, 0.0, atol=1e-15)


def test_exp_pure_translation():
    p = exp_se3(Twist([0, 0, 0], [1, 2, 3]))
    np.testing.assert_array_equal(p.rotation, np.eye(3))
    np.testing.assert_allclose(p.translation, [1, 2, 3])


def test_small_angle_branch_is_continuous():
    w = np.array([3e-9, -1e-9, 2e-9])
    np.testing.assert_allclose(so3_exp(w), rodrigues(w, np.linalg.norm(w)), atol=1e-16)


def test_log_identity_and_quarter_turn():
    np.testing.assert_array_equal(log_se3(Pose.identity()), np.zeros(6))
    xi = log_se3(Pose(rodrigues([0, 0, 1], np.pi / 2)))
    np.testing.assert_allclose(xi, [0, 0, np.pi / 2, 0, 0, 0], atol=1e-14)


def test_log_rejects_half_turn():
    with pytest.raises(SingularRotationError):
        log_se3(Pose(rodrigues([1, 1, 0], np.pi)))


def test_round_trip_1000_seeded_poses():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(1000):
        p = random_pose(rng, max_angle=np.pi - 1e-3)
        worst = max(worst, np.max(np.abs(exp_se3(log_se3(p)).matrix() - p.matrix())))
    assert worst < 1e-9


def test_so3_log_near_pi_non_strict():
    R = rodrigues([0.3, -0.2, 0.9], np.pi - 1e-5)
    np.testing.assert_allclose(so3_exp(so3_log(R)), R, atol=1e-9)


def test_compose_angle_addition():
    a = Pose(rodrigues([0, 0, 1], np.deg2rad(30)))
    b = Pose(rodrigues([0, 0, 1], np.deg2rad(60)))
    np.testing.assert_allclose(compose(a, b).rotation, rodrigues([0, 0, 1], np.pi / 2), atol=1e-15)


@given(poses)
def test_identity_and_inverse_laws(p):
    assert pose_close(compose(Pose.identity(), p), p, 0.0)
    assert pose_close(invert(invert(p)), p)
    assert pose_close(compose(p, invert(p)), Pose.identity())


@given(poses, poses, poses)
def test_associativity(a, b, c):
    assert pose_close(compose(compose(a, b), c), compose(a, compose(b, c)))


@given(poses)
def test_rotation_is_proper(p):
    R = exp_se3(log_se3(p)).rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_dq_identity():
    q = pose_to_dq(Pose.identity())
    np.testing.assert_array_equal(q.real, [1, 0, 0, 0])
    np.testing.assert_array_equal(q.dual, [0, 0, 0, 0])


def test_dq_pure_translation():
    q = pose_to_dq(Pose(np.eye(3), [2, 0, 0]))
    np.testing.assert_allclose(q.dual, [0, 1, 0, 0])


@given(poses)
def test_dq_round_trip_and_double_cover(p):
    q = pose_to_dq(p)
    assert abs(np.linalg.norm(q.real) - 1) < 1e-9
    assert abs(q.real @ q.dual) < 1e-9
    assert pose_close(dq_to_pose(q), p)
    assert pose_close(dq_to_pose(-q), dq_to_pose(q))


@given(poses, poses)
def test_dq_product_matches_composition(a, b):
    assert pose_close(dq_to_pose(pose_to_dq(a) * pose_to_dq(b)), compose(a, b))


def test_dq_non_unit_rejected():
    with pytest.raises(NormalizationError):
        dq_to_pose(DualQuaternion([2, 0, 0, 0], [0, 0, 0, 0]))


@settings(max_examples=20)
@given(st.lists(poses, min_size=1, max_size=5))
def test_trajectory_file_round_trip(tmp_path_factory, ps):
    path = tmp_path_factory.mktemp("traj") / "t.txt"
    stamps = np.arange(len(ps)) / 15.0
    write_trajectory(path, stamps, ps)
    t2, p2 = read_trajectory(path)
    np.testing.assert_allclose(t2, stamps, atol=1e-6)
    for a, b in zip(ps, p2):
        assert pose_close(a, b, 1e-8)
