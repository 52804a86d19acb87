"""Vectorized task environments: Reach, Suture Needle Lift, Needle Handover,
Threaded Needle Pass Ring.

State is structure-of-arrays over n independent envs; each env owns an RNG
stream seeded (seed XOR env index). Stepping has no cross-env coupling, so
partitioning envs across workers and merging by index reproduces sequential
results bit-for-bit.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .ik import DampedLeastSquares, IkMethod, clamp_step, ik_step, method_from_config
from .kinematics import forward_kinematics_arrays, geometric_jacobian_arrays, pose_error_arrays
from .robot import RobotDescription, default_psm, load_robot_description_file
from .so3 import (
    QUAT_IDENTITY,
    clamp_rotation,
    quat_mul,
    quat_normalize,
    quat_rotate,
    rotation_angle,
)
from .world import BatchWorld, CircularArc, ObjectSpec, RingFixture, RopeSpec, SceneSpec

log = logging.getLogger(__name__)

TASK_REACH = "reach"
TASK_LIFT = "needle_lift"
TASK_HANDOVER = "needle_handover"
TASK_PASS_RING = "threaded_needle_pass_ring"
TASKS = (TASK_REACH, TASK_LIFT, TASK_HANDOVER, TASK_PASS_RING)

SPACE_CARTESIAN = "cartesian_quat"
SPACE_JOINT = "joint"
ACTION_SPACES = (SPACE_CARTESIAN, SPACE_JOINT)

OBS_LAYOUT_VERSION = 1

OBS_DIMS = {TASK_REACH: 10, TASK_LIFT: 18, TASK_HANDOVER: 26, TASK_PASS_RING: 32}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    randomize: str = "IG"    # I = initial states, G = goal states, IG = both

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; expected one of {TASKS}")
        if self.randomize not in ("I", "G", "IG"):
            raise ValueError(f"randomize must be I, G or IG, got {self.randomize!r}")

    @property
    def arms(self) -> int:
        return 1 if self.name in (TASK_REACH, TASK_LIFT) else 2


@dataclass
class StepResult:
    observations: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    successes: np.ndarray
    events: dict = field(default_factory=dict)


def needle_grasp_points(cfg: dict) -> np.ndarray:
    nd = cfg["task"]["needle"]
    k = int(nd["grasp_point_count"])
    theta = np.linspace(0.0, nd["arc_angle"], k)
    return np.stack(
        [nd["arc_radius"] * np.cos(theta), nd["arc_radius"] * np.sin(theta), np.zeros(k)],
        axis=-1,
    )


def needle_tip_local(cfg: dict) -> np.ndarray:
    nd = cfg["task"]["needle"]
    a = nd["arc_angle"]
    return np.array([nd["arc_radius"] * np.cos(a), nd["arc_radius"] * np.sin(a), 0.0])


def needle_tail_local(cfg: dict) -> np.ndarray:
    nd = cfg["task"]["needle"]
    return np.array([nd["arc_radius"], 0.0, 0.0])


def build_scene(task: TaskSpec, cfg: dict) -> SceneSpec:
    t = cfg["task"]
    if task.name == TASK_REACH:
        return SceneSpec(objects=(), arms=1)

    nd = t["needle"]
    needle = ObjectSpec(
        id="needle",
        shape=CircularArc(nd["arc_radius"], nd["arc_angle"], nd["wire_radius"]),
        grasp_points=needle_grasp_points(cfg),
        free=True,
        rest_height=nd["wire_radius"],
    )
    if task.name == TASK_LIFT:
        return SceneSpec(objects=(needle,), arms=1)
    if task.name == TASK_HANDOVER:
        return SceneSpec(objects=(needle,), arms=2)

    ring = RingFixture(np.array(t["ring"]["center"]), np.array(t["ring"]["normal"]),
                       float(t["ring"]["radius"]))
    rp = t["rope"]
    rope = RopeSpec(
        n_particles=int(rp["particles"]),
        rest_length=float(rp["rest_length"]),
        iterations=int(rp["iterations"]),
        damping=float(cfg["sim"]["rope_damping"]),
        attachments=((0, "needle", needle_tail_local(cfg)),),
    )
    return SceneSpec(objects=(needle,), ring=ring, rope=rope,
                     ring_probe=("needle", needle_tip_local(cfg)), arms=2)


class EnvBatch:
    """n parallel copies of one task environment."""

    def __init__(self, task: TaskSpec, action_space: str, n: int, seed: int,
                 cfg: dict | None = None, auto_reset: bool = True,
                 desc: RobotDescription | None = None):
        if n < 1:
            raise ValueError("need at least one environment")
        if action_space not in ACTION_SPACES:
            raise ValueError(f"unknown action space {action_space!r}; expected one of {ACTION_SPACES}")
        self.task = task
        self.action_space = action_space
        self.n = n
        self.seed = int(seed)
        self.cfg = cfg if cfg is not None else config_mod.defaults()
        self.auto_reset = auto_reset

        path = self.cfg["robot"]["description_path"]
        self.desc = desc or (load_robot_description_file(path) if path else default_psm())
        self.arms = task.arms
        t = self.cfg["task"]
        if self.arms == 1:
            bases = [t["arm_base_single"]]
        else:
            bases = [t["arm_base_right"], t["arm_base_left"]]
        self.arm_base = np.asarray(bases, dtype=np.float64)        # (A, 3)
        self.home_q = np.asarray(t["home_q"], dtype=np.float64)
        self.horizon = int(t["horizon"])
        self.dt = float(self.cfg["sim"]["dt"])

        ikc = self.cfg["ik"]
        self.ik_method: IkMethod = method_from_config(ikc["method"], ikc)
        self.ik_step_clamp = float(ikc["step_clamp"])
        self.max_pos_delta = float(self.cfg["action"]["max_pos_delta"])
        self.max_rot_delta = float(self.cfg["action"]["max_rot_delta"])
        self.joint_rate = float(self.cfg["action"]["joint_rate_limit"])

        self.scene = build_scene(task, self.cfg)
        self.world = BatchWorld(self.scene, n, self.cfg)
        self.has_needle = len(self.scene.objects) > 0
        if self.has_needle:
            self.needle_idx = self.scene.object_index("needle")
            self.needle_grasp_local = self.scene.objects[self.needle_idx].grasp_points

        self.rng = [np.random.Generator(np.random.PCG64(self.seed ^ i)) for i in range(n)]

        A = self.arms
        self.q = np.zeros((n, A, 6))
        self.jaw = np.zeros((n, A))
        self.tip_pos = np.zeros((n, A, 3))
        self.tip_quat = np.tile(QUAT_IDENTITY, (n, A, 1))
        self.goal_pos = np.zeros((n, 3))
        self.steps = np.zeros(n, dtype=np.int64)
        # Sticky per-episode flags used by phased rewards / success predicates.
        self.grasp_bonus_given = np.zeros(n, dtype=bool)
        self.transfer_done = np.zeros(n, dtype=bool)
        self.ring_passed = np.zeros(n, dtype=bool)
        self.regrasped_after_pass = np.zeros(n, dtype=bool)

        self.recorder = None    # optional hook set by trajectory recording

        self.reset(np.arange(n))

    # ----------------------------------------------------------------- resets

    def _sample_reset(self, i: int):
        """Draw one env's episode randomization from its own stream."""
        g = self.rng[i]
        t = self.cfg["task"]
        half = float(t["table_half_extent"])
        rnd = self.task.randomize
        out = {}
        if self.task.name == TASK_REACH:
            z0, z1 = t["reach_goal_z_range"]
            out["goal"] = np.array([
                g.uniform(-half, half), g.uniform(-half, half), g.uniform(z0, z1),
            ])
            return out

        # Needle tasks: initial needle pose (I) and goal (G) randomized per mode.
        if "I" in rnd:
            # Initial randomization draws the needle position over the table
            # region; orientation stays canonical (flat on the table).
            npos = np.array([g.uniform(-half, half), g.uniform(-half, half), 0.0])
            yaw = 0.0
        else:
            npos = np.zeros(3)
            yaw = 0.0
        z0, z1 = t["goal_z_range"]
        if "G" in rnd:
            if self.task.name in (TASK_HANDOVER, TASK_PASS_RING):
                # Final goal on the left arm's side: the post-transfer carry
                # is a real leg of the task, not a no-op.
                goal = np.array([g.uniform(-half, -0.02), g.uniform(-half, half), g.uniform(z0, z1)])
            else:
                goal = np.array([g.uniform(-half, half), g.uniform(-half, half), g.uniform(z0, z1)])
        else:
            goal = np.array([-0.04, 0.0, 0.5 * (z0 + z1)])                 if self.task.name in (TASK_HANDOVER, TASK_PASS_RING) else                 np.array([0.0, 0.0, 0.5 * (z0 + z1)])
        if self.task.name == TASK_PASS_RING:
            # Needle starts near the ring on the negative-normal side.
            ring = self.scene.ring
            base = ring.center - ring.normal * 0.035
            jitter = np.array([0.0, g.uniform(-0.01, 0.01), g.uniform(-0.01, 0.01)]) if "I" in rnd else 0.0
            out["needle_pos"] = base + jitter
            out["needle_yaw"] = 0.0
            out["needle_quat"] = self._pass_ring_needle_quat()
        else:
            npos[2] = self.scene.objects[self.needle_idx].rest_height
            out["needle_pos"] = npos
            out["needle_yaw"] = yaw
            out["needle_quat"] = quat_normalize(
                np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
            )
        out["goal"] = goal
        return out

    def _pass_ring_needle_quat(self) -> np.ndarray:
        # Needle plane contains the ring normal so the arc can swing through.
        return np.array([np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0])

    def reset(self, idx: np.ndarray):
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if idx.size == 0:
            return
        for i in idx.tolist():
            s = self._sample_reset(i)
            self.goal_pos[i] = s["goal"]
            if self.has_needle:
                self.world.reset_envs(
                    np.array([i]),
                    s["needle_pos"][None, None, :],
                    s["needle_quat"][None, None, :],
                    rope_pos=self._initial_rope(s)[None] if self.scene.rope is not None else None,
                )
        self.q[idx] = self.home_q
        self.jaw[idx] = 1.0
        self.steps[idx] = 0
        self.grasp_bonus_given[idx] = False
        self.transfer_done[idx] = False
        self.ring_passed[idx] = False
        self.regrasped_after_pass[idx] = False
        self._refresh_tips(idx)

    def _initial_rope(self, s: dict) -> np.ndarray:
        rope = self.scene.rope
        tail = s["needle_pos"] + quat_rotate(s["needle_quat"], needle_tail_local(self.cfg))
        k = rope.n_particles
        offsets = np.arange(k)[:, None] * np.array([0.0, -rope.rest_length, 0.0])
        return tail + offsets

    def _refresh_tips(self, idx: np.ndarray):
        pos, quat, _, _ = forward_kinematics_arrays(self.desc, self.q[idx])
        self.tip_pos[idx] = pos + self.arm_base
        self.tip_quat[idx] = quat

    # ------------------------------------------------------------------ obs

    @property
    def obs_dim(self) -> int:
        return OBS_DIMS[self.task.name]

    @property
    def action_dim(self) -> int:
        per_arm = 8 if self.action_space == SPACE_CARTESIAN else 7
        return per_arm * self.arms

    def observe(self) -> np.ndarray:
        parts = []
        for a in range(self.arms):
            parts.append(self.tip_pos[:, a])
            parts.append(self.tip_quat[:, a])
            if self.task.name != TASK_REACH:
                parts.append(self.jaw[:, a, None])
        if self.has_needle:
            parts.append(self.world.obj_pos[:, self.needle_idx])
            parts.append(self.world.obj_quat[:, self.needle_idx])
        parts.append(self.goal_pos)
        if self.task.name == TASK_PASS_RING:
            ring = self.scene.ring
            parts.append(np.broadcast_to(ring.center, (self.n, 3)))
            parts.append(np.broadcast_to(ring.normal, (self.n, 3)))
        obs = np.concatenate(parts, axis=-1)
        assert obs.shape[1] == self.obs_dim
        return obs

    # ------------------------------------------------------------------ step

    def step(self, actions: np.ndarray) -> StepResult:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n, self.action_dim):
            raise ValueError(
                f"action shape {actions.shape} does not match (n={self.n}, dim={self.action_dim})"
            )
        bad = ~np.all(np.isfinite(actions), axis=1)
        if np.any(bad):
            log.warning("non-finite actions in %d env(s); flagging done", int(bad.sum()))
            actions = np.where(bad[:, None], 0.0, actions)
        obs_before = self.observe() if self.recorder is not None else None

        if self.action_space == SPACE_CARTESIAN:
            self._apply_cartesian(actions)
        else:
            self._apply_joint(actions)

        self._refresh_tips(np.arange(self.n))
        events = self.world.step(self.tip_pos, self.tip_quat, self.jaw, self.dt) \
            if self.has_needle else {"grasp": np.zeros((self.n, self.arms), bool),
                                     "release": np.zeros((self.n, self.arms), bool),
                                     "ring_pass": np.zeros(self.n, bool)}
        self._update_sticky(events)

        rewards, successes = self._reward_and_success(events)
        self.steps += 1
        timeout = self.steps >= self.horizon
        dones = successes | timeout | bad
        rewards = np.where(bad, 0.0, rewards)
        rewards = np.clip(rewards, -self.cfg["task"]["reward_bound"], self.cfg["task"]["reward_bound"])
        events["success"] = successes

        if self.recorder is not None:
            self.recorder.record(self, actions, events, obs_before)

        if self.auto_reset and np.any(dones):
            self.reset(np.nonzero(dones)[0])

        return StepResult(self.observe(), rewards, dones, successes, events)

    def _apply_cartesian(self, actions: np.ndarray):
        for a in range(self.arms):
            part = actions[:, a * 8:(a + 1) * 8]
            dp = np.clip(part[:, 0:3], -self.max_pos_delta, self.max_pos_delta)
            raw_q = part[:, 3:7]
            norms = np.sqrt(np.sum(raw_q * raw_q, axis=-1, keepdims=True))
            dq_rot = np.where(norms > 1e-12, raw_q / np.where(norms == 0.0, 1.0, norms),
                              QUAT_IDENTITY)
            dq_rot = clamp_rotation(dq_rot, self.max_rot_delta)
            self.jaw[:, a] = np.clip(part[:, 7], 0.0, 1.0)

            # Deltas are expressed in the arm base frame: translation adds,
            # rotation pre-multiplies the current orientation.
            target_pos = self.tip_pos[:, a] + dp
            target_quat = quat_mul(dq_rot, self.tip_quat[:, a])

            e = pose_error_arrays(self.tip_pos[:, a], self.tip_quat[:, a], target_pos, target_quat)
            J = geometric_jacobian_arrays(self.desc, self.q[:, a])
            dq = clamp_step(ik_step(J, e, self.ik_method), self.ik_step_clamp)
            self.q[:, a] = self.desc.clamp(self.q[:, a] + dq)

    def _apply_joint(self, actions: np.ndarray):
        for a in range(self.arms):
            part = actions[:, a * 7:(a + 1) * 7]
            target = self.desc.clamp(part[:, 0:6])
            delta = np.clip(target - self.q[:, a], -self.joint_rate, self.joint_rate)
            self.q[:, a] = self.desc.clamp(self.q[:, a] + delta)
            self.jaw[:, a] = np.clip(part[:, 6], 0.0, 1.0)

    # ------------------------------------------------------- rewards/success

    def _needle_world_grasp_points(self) -> np.ndarray:
        o = self.needle_idx
        return self.world.obj_pos[:, o, None, :] + quat_rotate(
            self.world.obj_quat[:, o, None, :], self.needle_grasp_local[None, :, :]
        )

    def _dist_tip_to_needle(self, arm: int) -> np.ndarray:
        wp = self._needle_world_grasp_points()
        d = np.sqrt(np.sum((wp - self.tip_pos[:, arm, None, :]) ** 2, axis=-1))
        return np.min(d, axis=-1)

    def _update_sticky(self, events: dict):
        if self.task.name in (TASK_HANDOVER, TASK_PASS_RING):
            right_holds = self.world.att_obj[:, 0] == self.needle_idx
            left_holds = self.world.att_obj[:, 1] == self.needle_idx
            # Transfer = right releases while the left arm is holding.
            self.transfer_done |= events["release"][:, 0] & left_holds
        if self.task.name == TASK_PASS_RING:
            self.ring_passed |= events["ring_pass"]
            self.regrasped_after_pass |= self.ring_passed & events["grasp"][:, 1]

    def _reward_and_success(self, events: dict):
        t = self.cfg["task"]
        tol = float(t["reach_tol"])
        name = self.task.name

        if name == TASK_REACH:
            d = np.linalg.norm(self.tip_pos[:, 0] - self.goal_pos, axis=-1)
            rot = rotation_angle(self.tip_quat[:, 0])
            success = d < tol
            reward = -d - t["reach_rot_weight"] * rot + t["success_bonus"] * success
            return reward, success

        needle_pos = self.world.obj_pos[:, self.needle_idx]
        d_goal = np.linalg.norm(needle_pos - self.goal_pos, axis=-1)

        if name == TASK_LIFT:
            grasped = self.world.att_obj[:, 0] == self.needle_idx
            d_tip = self._dist_tip_to_needle(0)
            bonus = np.where(grasped & ~self.grasp_bonus_given, t["grasp_bonus"], 0.0)
            self.grasp_bonus_given |= grasped
            # Phase is sticky on the grasp event: once grasped, the needle-to-
            # goal term stays on even through a drop, so releasing never pays.
            reward = np.where(self.grasp_bonus_given, -d_goal, -d_tip) + bonus
            success = grasped & (d_goal < tol)
            return reward, success

        right_holds = self.world.att_obj[:, 0] == self.needle_idx
        left_holds = self.world.att_obj[:, 1] == self.needle_idx

        if name == TASK_HANDOVER:
            d_right = self._dist_tip_to_needle(0)
            d_left = self._dist_tip_to_needle(1)
            transfer_pt = np.asarray(t.get("transfer_point", [0.0, 0.0, 0.07]))
            d_transfer = np.linalg.norm(needle_pos - transfer_pt, axis=-1)
            reward = np.where(
                self.transfer_done, -d_goal,
                np.where(right_holds & left_holds, -0.5 * d_goal,
                         np.where(right_holds, -d_transfer - 0.5 * d_left, -d_right)),
            )
            reward = reward + np.where(
                self.transfer_done & ~self.grasp_bonus_given, t["grasp_bonus"], 0.0
            )
            self.grasp_bonus_given |= self.transfer_done
            success = self.transfer_done & left_holds & (d_goal < tol)
            reward = reward + t["success_bonus"] * success
            return reward, success

        # Threaded needle pass ring.
        probe = self.world._probe_point()
        ring = self.scene.ring
        d_ring = np.linalg.norm(probe - ring.center, axis=-1)
        d_right = self._dist_tip_to_needle(0)
        d_left = self._dist_tip_to_needle(1)
        reward = np.where(
            self.ring_passed, -d_left,
            np.where(right_holds, -d_ring, -d_right),
        )
        reward = reward + np.where(events["ring_pass"], 2.0, 0.0)
        success = self.ring_passed & self.regrasped_after_pass & left_holds
        reward = reward + t["success_bonus"] * success
        return reward, success


def create_batch(task: TaskSpec, action_space: str, n: int, seed: int,
                 cfg: dict | None = None, **kwargs) -> EnvBatch:
    return EnvBatch(task, action_space, n, seed, cfg, **kwargs)


def throughput_bench(task: TaskSpec, n: int, steps: int = 100,
                     action_space: str = SPACE_CARTESIAN, seed: int = 0,
                     cfg: dict | None = None) -> dict:
    """Aggregate env-steps per wall second over `steps` batched steps with
    random actions (the 100-step methodology)."""
    import os

    env = EnvBatch(task, action_space, n, seed, cfg)
    g = np.random.Generator(np.random.PCG64(seed + 1))
    acts = g.standard_normal((steps, n, env.action_dim)) * 0.02
    env.step(acts[0])    # warmup outside the timed window
    t0 = time.perf_counter()
    for i in range(steps):
        env.step(acts[i])
    wall = time.perf_counter() - t0
    return {
        "task": task.name,
        "action_space": action_space,
        "envs": n,
        "steps": steps,
        "wall_time_s": wall,
        "steps_per_second": n * steps / wall,
        "threads": os.cpu_count(),
    }
