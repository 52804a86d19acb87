"""Differential inverse kinematics: four Jacobian-inversion methods.

All methods map a 6-DOF pose error to a joint increment. ik_step is batched
over leading dimensions; solve_ik iterates FK + ik_step with joint-limit
clamping inside the loop (projected update).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import forward_kinematics_arrays, geometric_jacobian_arrays, pose_error_arrays
from .robot import JointState, Pose, RobotDescription


class IkNumericalError(RuntimeError):
    """A method produced a non-finite step; inputs are reported, never hidden."""


@dataclass(frozen=True)
class PseudoInverse:
    pass


@dataclass(frozen=True)
class DampedLeastSquares:
    lam: float = 0.05

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")


@dataclass(frozen=True)
class JacobianTranspose:
    """Transpose step with the optimal first-order scale; being gradient
    descent it converges linearly at a conditioning-bound rate, so solve_ik
    accelerates it with heavy-ball momentum (`momentum`, 0 disables)."""

    alpha: float = 1.0
    momentum: float = 0.97

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass(frozen=True)
class AdaptiveSvd:
    sigma_threshold: float = 0.02

    def __post_init__(self):
        if self.sigma_threshold <= 0:
            raise ValueError("sigma_threshold must be > 0")


IkMethod = PseudoInverse | DampedLeastSquares | JacobianTranspose | AdaptiveSvd


@dataclass(frozen=True)
class IkConfig:
    max_iters: int = 200
    pos_tol: float = 1e-4
    rot_tol: float = 1e-3
    step_clamp: float = 0.05   # max ||dq|| per iteration, mixed rad/m norm

    def __post_init__(self):
        if self.max_iters < 1 or self.pos_tol <= 0 or self.rot_tol <= 0 or self.step_clamp <= 0:
            raise ValueError("invalid IkConfig")


@dataclass
class IkResult:
    converged: bool
    state: JointState
    residual: float          # ||pose error|| of the returned (best) iterate
    pos_err: float
    rot_err: float
    iterations: int


def method_from_config(name: str, params: dict) -> IkMethod:
    name = name.lower().replace("-", "_")
    if name in ("pinv", "pseudo_inverse", "pseudoinverse"):
        return PseudoInverse()
    if name in ("dls", "damped_least_squares", "levenberg_marquardt"):
        return DampedLeastSquares(lam=float(params.get("lambda", params.get("lam", 0.05))))
    if name in ("jt", "jacobian_transpose", "transpose"):
        return JacobianTranspose(alpha=float(params.get("alpha", 1.0)))
    if name in ("adaptive_svd", "svd"):
        return AdaptiveSvd(sigma_threshold=float(params.get("sigma_threshold", 0.02)))
    raise ValueError(f"unknown IK method {name!r}")


def _matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    # Elementwise contraction instead of BLAS so per-slice results do not
    # depend on the surrounding batch shape (batch-order independence).
    return np.sum(M * v[..., None, :], axis=-1)


def _mat_mt(J: np.ndarray) -> np.ndarray:
    """J Jᵀ for stacked (..., 6, n) matrices, elementwise."""
    return np.sum(J[..., :, None, :] * J[..., None, :, :], axis=-1)


def ik_step(J: np.ndarray, e: np.ndarray, method: IkMethod) -> np.ndarray:
    """One joint increment dq for Jacobian(s) J (..., 6, n) and error(s) e (..., 6)."""
    J = np.asarray(J, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    Jt = np.swapaxes(J, -1, -2)

    if isinstance(method, DampedLeastSquares):
        A = _mat_mt(J) + (method.lam ** 2) * np.eye(J.shape[-2])
        x = np.linalg.solve(A, e[..., None])[..., 0]
        dq = _matvec(Jt, x)
    elif isinstance(method, JacobianTranspose):
        # Transpose direction with the optimal first-order step scale
        # <e, JJᵀe>/||JJᵀe||²; alpha multiplies that scale (1 at J = I).
        Jt_e = _matvec(Jt, e)
        JJt_e = _matvec(J, Jt_e)
        num = np.sum(e * JJt_e, axis=-1)
        den = np.sum(JJt_e * JJt_e, axis=-1)
        w = np.where(den > 0.0, num / np.where(den == 0.0, 1.0, den), 0.0)
        dq = method.alpha * w[..., None] * Jt_e
    elif isinstance(method, PseudoInverse):
        U, s, Vt = np.linalg.svd(J, full_matrices=False)
        cutoff = 1e-10 * s[..., :1]
        inv_s = np.where(s > cutoff, 1.0 / np.where(s == 0.0, 1.0, s), 0.0)
        Ut_e = _matvec(np.swapaxes(U, -1, -2), e)
        dq = _matvec(np.swapaxes(Vt, -1, -2), inv_s * Ut_e)
    elif isinstance(method, AdaptiveSvd):
        U, s, Vt = np.linalg.svd(J, full_matrices=False)
        t = method.sigma_threshold
        # Damping ramps linearly from 0 (sigma >= t) to t (sigma = 0).
        mu = np.where(s >= t, 0.0, t - s)
        factor = np.where(s == 0.0, 0.0, s / (s * s + mu * mu))
        Ut_e = _matvec(np.swapaxes(U, -1, -2), e)
        dq = _matvec(np.swapaxes(Vt, -1, -2), factor * Ut_e)
    else:
        raise TypeError(f"unknown IK method {method!r}")

    if not np.all(np.isfinite(dq)):
        raise IkNumericalError(f"non-finite IK step from {method!r}")
    return dq


def clamp_step(dq: np.ndarray, max_norm: float) -> np.ndarray:
    n = np.sqrt(np.sum(dq * dq, axis=-1, keepdims=True))
    scale = np.where(n > max_norm, max_norm / np.where(n == 0.0, 1.0, n), 1.0)
    return dq * scale


def solve_ik_batch(
    desc: RobotDescription,
    q0: np.ndarray,
    target_pos: np.ndarray,
    target_quat: np.ndarray,
    method: IkMethod,
    cfg: IkConfig,
):
    """Vectorized solve over a batch of problems.

    Returns (q (...,n), converged (...,), pos_err, rot_err, iterations).
    Converged problems stop updating; iterations records the first iteration
    at which each problem met both tolerances (cfg.max_iters if never).
    """
    q = np.array(q0, dtype=np.float64, copy=True)
    lo, hi = desc.lower_limits, desc.upper_limits

    best_q = q.copy()
    tip_pos, tip_quat, _, _ = forward_kinematics_arrays(desc, q)
    e = pose_error_arrays(tip_pos, tip_quat, target_pos, target_quat)
    pos_err = np.linalg.norm(e[..., :3], axis=-1)
    rot_err = np.linalg.norm(e[..., 3:], axis=-1)
    best_res = np.sqrt(np.sum(e * e, axis=-1))
    done = (pos_err < cfg.pos_tol) & (rot_err < cfg.rot_tol)
    iters = np.where(done, 0, cfg.max_iters)

    beta = method.momentum if isinstance(method, JacobianTranspose) else 0.0
    mom = np.zeros_like(q)

    for it in range(1, cfg.max_iters + 1):
        if np.all(done):
            break
        J = geometric_jacobian_arrays(desc, q)
        dq = ik_step(J, e, method)
        if beta:
            dq = dq + beta * mom
        dq = clamp_step(dq, cfg.step_clamp)
        q_new = np.clip(q + dq, lo, hi)
        if beta:
            mom = np.where(done[..., None], 0.0, q_new - q)
        q = np.where(done[..., None], q, q_new)

        tip_pos, tip_quat, _, _ = forward_kinematics_arrays(desc, q)
        e = pose_error_arrays(tip_pos, tip_quat, target_pos, target_quat)
        pos_err_i = np.linalg.norm(e[..., :3], axis=-1)
        rot_err_i = np.linalg.norm(e[..., 3:], axis=-1)
        res = np.sqrt(np.sum(e * e, axis=-1))
        better = ~done & (res < best_res)
        best_q = np.where(better[..., None], q, best_q)
        best_res = np.where(better, res, best_res)
        newly = ~done & (pos_err_i < cfg.pos_tol) & (rot_err_i < cfg.rot_tol)
        iters = np.where(newly, it, iters)
        done = done | newly
        pos_err = np.where(done, pos_err_i, pos_err)
        rot_err = np.where(done, rot_err_i, rot_err)

    final_q = np.where(done[..., None], q, best_q)
    tip_pos, tip_quat, _, _ = forward_kinematics_arrays(desc, final_q)
    e = pose_error_arrays(tip_pos, tip_quat, target_pos, target_quat)
    return (
        final_q,
        done,
        np.linalg.norm(e[..., :3], axis=-1),
        np.linalg.norm(e[..., 3:], axis=-1),
        iters,
    )


def solve_ik(
    desc: RobotDescription,
    q0: JointState,
    target: Pose,
    method: IkMethod,
    cfg: IkConfig = IkConfig(),
) -> IkResult:
    """Iterative IK from q0 to the target pose. NotConverged is a value: the
    result carries the best iterate by residual, converged=False."""
    q, conv, pos_err, rot_err, iters = solve_ik_batch(
        desc, q0.q, target.position, target.orientation, method, cfg
    )
    residual = float(np.hypot(pos_err, rot_err))
    return IkResult(
        converged=bool(conv),
        state=JointState(q, q0.jaw),
        residual=residual,
        pos_err=float(pos_err),
        rot_err=float(rot_err),
        iterations=int(iters),
    )
