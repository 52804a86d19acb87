"""Forward kinematics, geometric Jacobian, pose error and RCM deviation.

All functions are batched: q has shape (..., n_joints) and outputs broadcast
over the leading dimensions. Everything is pure and elementwise, so results
for a given configuration are bit-identical regardless of batch shape.
"""

from __future__ import annotations

import numpy as np

from .robot import PRISMATIC, REVOLUTE, JointState, Pose, RobotDescription
from .so3 import (
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_rotate,
    rotvec_between,
)


def forward_kinematics_arrays(desc: RobotDescription, q: np.ndarray):
    """Tip pose for configurations q (..., n): returns (pos (...,3), quat (...,4)).

    Also returns per-joint frame positions/axes needed by the Jacobian:
    joint_pos (..., n, 3) is each joint frame origin (after its fixed origin
    transform, before motion), joint_axis (..., n, 3) the joint axis in the
    base frame.
    """
    q = np.asarray(q, dtype=np.float64)
    batch = q.shape[:-1]
    pos = np.zeros(batch + (3,))
    rot = np.broadcast_to(np.array([1.0, 0.0, 0.0, 0.0]), batch + (4,)).copy()

    joint_pos = []
    joint_axis = []
    for i, joint in enumerate(desc.joints):
        pos = pos + quat_rotate(rot, np.broadcast_to(joint.origin_pos, batch + (3,)))
        rot = quat_mul(rot, np.broadcast_to(joint.origin_quat, batch + (4,)))
        axis_world = quat_rotate(rot, np.broadcast_to(joint.axis, batch + (3,)))
        joint_pos.append(pos)
        joint_axis.append(axis_world)
        qi = q[..., i]
        if joint.kind == REVOLUTE:
            rot = quat_mul(rot, quat_from_axis_angle(np.broadcast_to(joint.axis, batch + (3,)), qi))
        else:
            pos = pos + axis_world * qi[..., None]

    pos = pos + quat_rotate(rot, np.broadcast_to(desc.ee_offset_pos, batch + (3,)))
    rot = quat_mul(rot, np.broadcast_to(desc.ee_offset_quat, batch + (4,)))
    rot = quat_normalize(rot)
    return pos, rot, np.stack(joint_pos, axis=-2), np.stack(joint_axis, axis=-2)


def forward_kinematics(desc: RobotDescription, state: JointState):
    """Gripper-tip Pose plus the list of per-joint frame Poses."""
    q = desc.clamp(state.q)
    pos = np.zeros(3)
    rot = np.array([1.0, 0.0, 0.0, 0.0])
    link_poses = []
    for i, joint in enumerate(desc.joints):
        pos = pos + quat_rotate(rot, joint.origin_pos)
        rot = quat_mul(rot, joint.origin_quat)
        if joint.kind == REVOLUTE:
            rot = quat_mul(rot, quat_from_axis_angle(joint.axis, q[i]))
        else:
            pos = pos + quat_rotate(rot, joint.axis) * q[i]
        link_poses.append(Pose(pos.copy(), quat_normalize(rot)))
    pos = pos + quat_rotate(rot, desc.ee_offset_pos)
    rot = quat_mul(rot, desc.ee_offset_quat)
    return Pose(pos, quat_normalize(rot)), link_poses


def geometric_jacobian_arrays(desc: RobotDescription, q: np.ndarray) -> np.ndarray:
    """Base-frame geometric Jacobian (..., 6, n), linear rows first."""
    q = np.asarray(q, dtype=np.float64)
    tip_pos, _, joint_pos, joint_axis = forward_kinematics_arrays(desc, q)
    cols = []
    for i, joint in enumerate(desc.joints):
        z = joint_axis[..., i, :]
        if joint.kind == REVOLUTE:
            lin = np.cross(z, tip_pos - joint_pos[..., i, :])
            ang = z
        else:
            lin = z
            ang = np.zeros_like(z)
        cols.append(np.concatenate([lin, ang], axis=-1))
    return np.stack(cols, axis=-1)


def geometric_jacobian(desc: RobotDescription, state: JointState) -> np.ndarray:
    return geometric_jacobian_arrays(desc, desc.clamp(state.q))


def pose_error_arrays(cur_pos, cur_quat, tgt_pos, tgt_quat) -> np.ndarray:
    """6-vector (translation; axis-angle of target ⊗ current⁻¹), batched."""
    dp = np.asarray(tgt_pos, dtype=np.float64) - np.asarray(cur_pos, dtype=np.float64)
    drot = rotvec_between(cur_quat, tgt_quat)
    return np.concatenate([dp, drot], axis=-1)


def pose_error(current: Pose, target: Pose) -> np.ndarray:
    return pose_error_arrays(current.position, current.orientation, target.position, target.orientation)


def rcm_deviation_arrays(desc: RobotDescription, q: np.ndarray) -> np.ndarray:
    """Perpendicular distance from rcm_point to the instrument-shaft line.

    The shaft line passes through the prismatic joint's frame origin along
    its (world) axis.
    """
    if desc.rcm_point is None:
        raise ValueError("description has no rcm_point")
    idx = next(i for i, j in enumerate(desc.joints) if j.kind == PRISMATIC)
    _, _, joint_pos, joint_axis = forward_kinematics_arrays(desc, q)
    p = joint_pos[..., idx, :]
    u = joint_axis[..., idx, :]
    d = desc.rcm_point - p
    along = np.sum(d * u, axis=-1, keepdims=True) * u
    perp = d - along
    return np.sqrt(np.sum(perp * perp, axis=-1))


def rcm_deviation(desc: RobotDescription, state: JointState) -> float:
    return float(rcm_deviation_arrays(desc, desc.clamp(state.q)))
