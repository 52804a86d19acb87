"""Kinematics tests against independent oracles.

The oracle below builds the chain with plain 4x4 homogeneous matrices and
Rodrigues rotations — a separate code path from the quaternion-based
implementation under test.
"""

import numpy as np
import pytest

from psmsim.kinematics import (
    forward_kinematics,
    forward_kinematics_arrays,
    geometric_jacobian,
    geometric_jacobian_arrays,
    pose_error,
    pose_error_arrays,
    rcm_deviation,
)
from psmsim.robot import (
    DescriptionValidationError,
    JointState,
    Pose,
    default_psm,
    load_robot_description,
)
from psmsim.so3 import quat_to_rotvec

# ---------------------------------------------------------------- the oracle


def rodrigues(axis, angle):
    axis = np.asarray(axis, dtype=float)
    K = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def quat_to_mat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def homogeneous(R, p):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def fk_matrix_oracle(desc, q):
    """Tip pose via a brute-force 4x4 matrix chain."""
    T = np.eye(4)
    for joint, qi in zip(desc.joints, q):
        T = T @ homogeneous(quat_to_mat(joint.origin_quat), joint.origin_pos)
        if joint.kind == "revolute":
            T = T @ homogeneous(rodrigues(joint.axis, qi), np.zeros(3))
        else:
            T = T @ homogeneous(np.eye(3), joint.axis * qi)
    T = T @ homogeneous(quat_to_mat(desc.ee_offset_quat), desc.ee_offset_pos)
    return T


def random_configs(desc, n, seed):
    rng = np.random.default_rng(seed)
    lo, hi = desc.lower_limits, desc.upper_limits
    return rng.uniform(lo, hi, size=(n, 6))


# ------------------------------------------------------------------- loading


def test_default_description_is_psm_profile():
    desc = default_psm()
    assert desc.n_joints == 6
    assert tuple(j.kind for j in desc.joints) == (
        "revolute", "revolute", "prismatic", "revolute", "revolute", "revolute",
    )
    assert desc.rcm_point is not None


def test_non_unit_axis_rejected_with_joint_name():
    src = _patched_default("axis: [0.0, 1.0, 0.0]", "axis: [0.0, 0.0, 2.0]")
    with pytest.raises(DescriptionValidationError, match="outer_yaw"):
        load_robot_description(src)


def test_wrong_joint_order_rejected():
    # Turn the last revolute joint into a second prismatic: RRPRRP.
    src = _patched_default(
        "  - name: wrist_yaw\n    kind: revolute",
        "  - name: wrist_yaw\n    kind: prismatic",
    )
    src = src.replace("limits: [-1.4, 1.4]\nee_offset", "limits: [0.0, 0.1]\nee_offset")
    with pytest.raises(DescriptionValidationError, match="R,R,P,R,R,R"):
        load_robot_description(src)


def test_inverted_limits_rejected():
    src = _patched_default("limits: [0.0, 0.24]", "limits: [0.24, 0.0]")
    with pytest.raises(DescriptionValidationError, match="insertion"):
        load_robot_description(src)


def _patched_default(old, new):
    from psmsim.robot import default_psm_text

    src = default_psm_text()
    assert old in src
    return src.replace(old, new, 1)


# ------------------------------------------------------------------------ FK


SINGLE_REVOLUTE = """
format_version: 1
name: one_joint
joints:
  - name: base
    kind: revolute
    axis: [0.0, 0.0, 1.0]
    origin: {translation: [0.0, 0.0, 0.0]}
    limits: [-3.14, 3.14]
ee_offset:
  translation: [0.3, 0.0, 0.0]
"""


def test_fk_zero_configuration_is_fixed_transform_product():
    desc = default_psm()
    pose, _ = forward_kinematics(desc, JointState(np.zeros(6)))
    T = fk_matrix_oracle(desc, np.zeros(6))
    np.testing.assert_allclose(pose.position, T[:3, 3], atol=1e-12)


def test_fk_planar_rotation():
    # Revolute about z with tip at (L, 0, 0): a quarter turn puts it at (0, L, 0).
    desc = load_robot_description(SINGLE_REVOLUTE, profile=None)
    pos, _, _, _ = forward_kinematics_arrays(desc, np.array([np.pi / 2]))
    np.testing.assert_allclose(pos, [0.0, 0.3, 0.0], atol=1e-12)


def test_fk_matches_matrix_chain_oracle():
    desc = default_psm()
    qs = random_configs(desc, 200, seed=1)
    pos, quat, _, _ = forward_kinematics_arrays(desc, qs)
    for i in range(qs.shape[0]):
        T = fk_matrix_oracle(desc, qs[i])
        np.testing.assert_allclose(pos[i], T[:3, 3], atol=1e-10)
        np.testing.assert_allclose(quat_to_mat(quat[i]), T[:3, :3], atol=1e-10)


def test_fk_quaternion_normalized_and_deterministic():
    desc = default_psm()
    qs = random_configs(desc, 500, seed=2)
    _, quat, _, _ = forward_kinematics_arrays(desc, qs)
    norms = np.linalg.norm(quat, axis=-1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9
    pos2, quat2, _, _ = forward_kinematics_arrays(desc, qs)
    _, quat1, _, _ = forward_kinematics_arrays(desc, qs)
    assert np.array_equal(quat1, quat2)


def test_fk_batch_shape_independent():
    # Same configuration gives bit-identical output alone or inside a batch.
    desc = default_psm()
    qs = random_configs(desc, 32, seed=3)
    pos_b, quat_b, _, _ = forward_kinematics_arrays(desc, qs)
    for i in (0, 7, 31):
        pos_1, quat_1, _, _ = forward_kinematics_arrays(desc, qs[i])
        assert np.array_equal(pos_b[i], pos_1)
        assert np.array_equal(quat_b[i], quat_1)


# ------------------------------------------------------------------ Jacobian


def jacobian_fd_oracle(desc, q, h=1e-6):
    """Central finite differences; orientation rows via quaternion-log rate."""
    from psmsim.so3 import quat_conj, quat_mul

    J = np.zeros((6, 6))
    for k in range(6):
        dq = np.zeros(6)
        dq[k] = h
        p_hi, r_hi, _, _ = forward_kinematics_arrays(desc, q + dq)
        p_lo, r_lo, _, _ = forward_kinematics_arrays(desc, q - dq)
        J[:3, k] = (p_hi - p_lo) / (2 * h)
        J[3:, k] = quat_to_rotvec(quat_mul(r_hi, quat_conj(r_lo))) / (2 * h)
    return J


def test_jacobian_prismatic_column():
    src = """
format_version: 1
name: one_prismatic
joints:
  - name: slide
    kind: prismatic
    axis: [0.0, 0.0, 1.0]
    limits: [0.0, 1.0]
"""
    desc = load_robot_description(src, profile=None)
    J = geometric_jacobian_arrays(desc, np.array([0.37]))
    np.testing.assert_allclose(J[:, 0], [0, 0, 1, 0, 0, 0], atol=1e-15)


def test_jacobian_revolute_base_column():
    desc = load_robot_description(SINGLE_REVOLUTE, profile=None)
    J = geometric_jacobian_arrays(desc, np.array([0.0]))
    # Tip at (L, 0, 0), axis z: column is (z x p ; z) = (0, L, 0, 0, 0, 1).
    np.testing.assert_allclose(J[:, 0], [0, 0.3, 0, 0, 0, 1], atol=1e-12)


def test_jacobian_matches_finite_differences():
    desc = default_psm()
    qs = random_configs(desc, 100, seed=4)
    # Keep away from limits so central differences stay in-range.
    qs = 0.95 * qs + 0.025 * (desc.lower_limits + desc.upper_limits)
    J = geometric_jacobian_arrays(desc, qs)
    for i in range(qs.shape[0]):
        J_fd = jacobian_fd_oracle(desc, qs[i])
        assert np.max(np.abs(J[i] - J_fd)) < 1e-5


# ---------------------------------------------------------------- pose error


def test_pose_error_identity_and_translation():
    a = Pose(np.array([0.1, 0.2, 0.3]), np.array([1.0, 0, 0, 0]))
    assert np.array_equal(pose_error(a, a), np.zeros(6))
    b = Pose(a.position + np.array([0.01, 0, 0]), a.orientation)
    np.testing.assert_allclose(pose_error(a, b), [0.01, 0, 0, 0, 0, 0], atol=1e-15)


def test_pose_error_pure_rotation():
    a = Pose(np.zeros(3), np.array([1.0, 0, 0, 0]))
    half = np.pi / 4
    b = Pose(np.zeros(3), np.array([np.cos(half), 0.0, 0.0, np.sin(half)]))
    np.testing.assert_allclose(pose_error(a, b), [0, 0, 0, 0, 0, np.pi / 2], atol=1e-12)


def test_pose_error_translation_antisymmetric():
    rng = np.random.default_rng(5)
    for _ in range(50):
        qa = rng.standard_normal(4)
        qb = rng.standard_normal(4)
        qa /= np.linalg.norm(qa)
        qb /= np.linalg.norm(qb)
        a = Pose(rng.standard_normal(3), qa)
        b = Pose(rng.standard_normal(3), qb)
        e_ab = pose_error(a, b)
        e_ba = pose_error(b, a)
        np.testing.assert_allclose(e_ab[:3], -e_ba[:3], atol=1e-15)


# ----------------------------------------------------------------------- RCM


def test_rcm_zero_on_shaft_and_offset():
    desc = default_psm()
    # Default geometry: yaw/pitch axes intersect at the RCM and the shaft
    # passes through it, so deviation is structurally zero.
    for q in random_configs(desc, 50, seed=6):
        assert rcm_deviation(desc, JointState(q)) < 1e-12


def test_rcm_perpendicular_offset():
    src = _patched_default("rcm_point: [0.0, 0.0, 0.0]", "rcm_point: [0.001, 0.0, 0.0]")
    desc = load_robot_description(src)
    # Un-rotated shaft straight down: a 1 mm x-offset is 1 mm off the line.
    d = rcm_deviation(desc, JointState(np.array([0.0, 0.0, 0.1, 0.0, 0.0, 0.0])))
    assert abs(d - 0.001) < 1e-15


def test_rcm_matches_point_line_oracle():
    src = _patched_default("rcm_point: [0.0, 0.0, 0.0]", "rcm_point: [0.004, -0.002, 0.001]")
    desc = load_robot_description(src)
    for q in random_configs(desc, 50, seed=7):
        _, _, jpos, jaxis = forward_kinematics_arrays(desc, q)
        p, u = jpos[2], jaxis[2]
        rcm = np.array([0.004, -0.002, 0.001])
        # Closed-form point-to-line distance.
        expected = np.linalg.norm(np.cross(rcm - p, u)) / np.linalg.norm(u)
        assert abs(rcm_deviation(desc, JointState(q)) - expected) < 1e-12
