"""Batched quaternion and rigid-transform helpers.

Quaternions are stored w-first (w, x, y, z) in float64 arrays of shape
(..., 4); all functions broadcast over leading batch dimensions. Only
elementwise numpy ops are used (no BLAS matmul) so results are bit-identical
for the same element regardless of batch shape — the record/replay
determinism contract depends on this.
"""

from __future__ import annotations

import numpy as np

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Normalize and canonicalize sign so w >= 0."""
    q = np.asarray(q, dtype=np.float64)
    n = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    q = q / n
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] = -out[..., 1:]
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by unit quaternion(s) q."""
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def quat_from_axis_angle(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Unit quaternion for rotation of `angle` radians about unit `axis`."""
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle
    s = np.sin(half)
    w = np.cos(half)
    xyz = np.asarray(axis, dtype=np.float64) * s[..., None]
    return np.concatenate([w[..., None], xyz], axis=-1)


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) -> quaternion."""
    rv = np.asarray(rv, dtype=np.float64)
    angle = np.sqrt(np.sum(rv * rv, axis=-1))
    half = 0.5 * angle
    # sin(x)/x with the series limit at x -> 0
    small = angle < 1e-12
    k = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    w = np.cos(half)
    return np.concatenate([w[..., None], rv * k[..., None]], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Log map: quaternion -> rotation vector with angle in [0, pi]."""
    q = quat_normalize(q)
    w = q[..., 0]
    vec = q[..., 1:]
    n = np.sqrt(np.sum(vec * vec, axis=-1))
    angle = 2.0 * np.arctan2(n, w)
    small = n < 1e-12
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, n))
    return vec * scale[..., None]


def rotvec_between(q_from: np.ndarray, q_to: np.ndarray) -> np.ndarray:
    """Axis-angle of the relative rotation q_to ⊗ q_from⁻¹."""
    return quat_to_rotvec(quat_mul(q_to, quat_conj(q_from)))


def rotation_angle(q: np.ndarray) -> np.ndarray:
    """Magnitude of the rotation represented by q, in [0, pi]."""
    q = np.asarray(q, dtype=np.float64)
    vec = q[..., 1:]
    n = np.sqrt(np.sum(vec * vec, axis=-1))
    return 2.0 * np.arctan2(n, np.abs(q[..., 0]))


def clamp_rotation(q: np.ndarray, max_angle: float) -> np.ndarray:
    """Scale the rotation of q down so its angle does not exceed max_angle."""
    rv = quat_to_rotvec(q)
    angle = np.sqrt(np.sum(rv * rv, axis=-1, keepdims=True))
    scale = np.where(angle > max_angle, max_angle / np.where(angle == 0.0, 1.0, angle), 1.0)
    return quat_from_rotvec(rv * scale)


def pose_compose(p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray):
    """Compose rigid transforms: (p1, q1) ∘ (p2, q2)."""
    return p1 + quat_rotate(q1, p2), quat_mul(q1, q2)


def pose_inverse(p: np.ndarray, q: np.ndarray):
    qi = quat_conj(q)
    return quat_rotate(qi, -p), qi


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (..., 3, 3) from unit quaternion."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)
