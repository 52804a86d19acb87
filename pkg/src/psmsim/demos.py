"""Hand-scripted state-machine demonstration generators and record/replay.

Each task has a phase sequence whose waypoints are functions of the scene;
the controller runs vectorized across a batch of envs, drives them with
Cartesian actions, optionally jitters waypoints and injects action noise,
and records every step as a Trajectory. Failed demos carry the phase name
and residual instead of silently vanishing.

Demo design notes, for cloning-friendliness: jaws are state-keyed rather
than phase-keyed (a jaw that stays closed for a whole stage gives an
unambiguous obs -> jaw mapping; grasping fires on proximity anyway), and
approaches beeline straight to the grasp point — grasping is kinematic
attachment, so there is nothing to collide with on the way in, and a
single-attractor direction field is what cloned policies can imitate.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from .envs import (
    OBS_LAYOUT_VERSION,
    SPACE_CARTESIAN,
    TASK_HANDOVER,
    TASK_LIFT,
    TASK_PASS_RING,
    EnvBatch,
    TaskSpec,
    create_batch,
)
from .so3 import clamp_rotation, quat_conj
from .trajectory import Trajectory, TrajectoryHeader, TrajectoryStep


@dataclass
class ScriptPhase:
    """One stage of a scripted demo: which arm steers, what the jaws do,
    and how long before giving up."""

    name: str
    arm: int
    jaw: tuple
    timeout: int

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("phase timeout must be positive")


@dataclass
class Failed:
    phase: str
    residual: float
    env_index: int


class BatchRecorder:
    """Records one Trajectory per env while the scripted controller runs."""

    def __init__(self, env: EnvBatch, seeds: list[int], config_hash: str, randomize: str):
        self.env = env
        self.active = np.ones(env.n, dtype=bool)
        self.trajectories = [
            Trajectory(TrajectoryHeader(
                task=env.task.name,
                action_space=env.action_space,
                obs_layout_version=OBS_LAYOUT_VERSION,
                seed=seeds[i],
                config_hash=config_hash,
                dt=env.dt,
                arms=env.arms,
                objects=[o.id for o in env.scene.objects],
                rope_particles=env.scene.rope.n_particles if env.scene.rope else 0,
                randomize=randomize,
            ))
            for i in range(env.n)
        ]

    def record(self, env: EnvBatch, actions: np.ndarray, events: dict, obs_before: np.ndarray):
        w = env.world
        for i in np.nonzero(self.active)[0]:
            t = self.trajectories[i]
            t.steps.append(TrajectoryStep(
                t=len(t.steps) * env.dt,
                q=env.q[i].copy(),
                tip_pos=env.tip_pos[i].copy(),
                tip_quat=env.tip_quat[i].copy(),
                jaw=env.jaw[i].copy(),
                action=actions[i].copy(),
                obs=obs_before[i].copy(),
                obj_pos=w.obj_pos[i].copy() if env.has_needle else np.zeros((0, 3)),
                obj_quat=w.obj_quat[i].copy() if env.has_needle else np.zeros((0, 4)),
                rope=w.rope_pos[i].copy() if w.rope_pos is not None else None,
                events={
                    "grasp": events["grasp"][i].tolist(),
                    "release": events["release"][i].tolist(),
                    "ring_pass": bool(events["ring_pass"][i]),
                    "success": bool(events["success"][i]),
                },
            ))


HOVER = 0.015    # approach waypoint height above the grasp point

# Jaw entries: a number is a fixed command; "descend" closes continuously
# with height above the grasp point (state-keyed, so the obs -> jaw mapping
# stays single-valued for cloning).
def _phases_for(task: TaskSpec) -> list[ScriptPhase]:
    if task.name == TASK_LIFT:
        return [
            ScriptPhase("approach_above", 0, (0.8,), 200),
            ScriptPhase("descend", 0, ("descend",), 120),
            ScriptPhase("close_jaw", 0, (0.0,), 40),
            ScriptPhase("lift_to_goal", 0, (0.0,), 250),
        ]
    if task.name == TASK_HANDOVER:
        return [
            ScriptPhase("r_approach", 0, (0.8, 0.8), 200),
            ScriptPhase("r_descend", 0, ("descend", 0.8), 120),
            ScriptPhase("r_close", 0, (0.0, 0.8), 40),
            ScriptPhase("r_lift_to_transfer", 0, (0.0, 0.8), 200),
            ScriptPhase("l_approach", 1, (0.0, 0.8), 200),
            ScriptPhase("l_descend", 1, (0.0, "descend"), 120),
            ScriptPhase("l_close", 1, (0.0, 0.0), 40),
            ScriptPhase("r_release", 0, (1.0, 0.0), 30),
            ScriptPhase("l_to_goal", 1, (1.0, 0.0), 250),
        ]
    if task.name == TASK_PASS_RING:
        return [
            ScriptPhase("r_approach", 0, (0.8, 0.8), 200),
            ScriptPhase("r_descend", 0, ("descend", 0.8), 120),
            ScriptPhase("r_close", 0, (0.0, 0.8), 40),
            ScriptPhase("r_pre_ring", 0, (0.0, 0.8), 250),
            ScriptPhase("r_through_ring", 0, (0.0, 0.8), 200),
            ScriptPhase("l_approach", 1, (0.0, 0.8), 200),
            ScriptPhase("l_descend", 1, (0.0, "descend"), 120),
            ScriptPhase("l_close", 1, (0.0, 0.0), 40),
            ScriptPhase("r_release", 0, (1.0, 0.0), 30),
            ScriptPhase("l_retreat", 1, (1.0, 0.0), 250),
        ]
    raise ValueError(f"no scripted generator for task {task.name!r}")


class ScriptedController:
    """Vectorized per-env phase machine producing Cartesian actions."""

    def __init__(self, env: EnvBatch, noise: float, rng_list: list[np.random.Generator],
                 action_noise: float = 0.0, pace: float = 0.5):
        self.env = env
        self.noise = noise
        self.action_noise = action_noise
        self.pace = pace
        self.rngs = rng_list
        self.phases = _phases_for(env.task)
        n = env.n
        tj = float(env.cfg["demos"].get("transfer_jitter", 0.0))
        self.transfer_off = np.stack([rng_list[i].uniform(-tj, tj, 3) for i in range(n)]) \
            if tj > 0 else np.zeros((n, 3))
        self.phase_idx = np.zeros(n, dtype=np.int64)
        self.phase_steps = np.zeros(n, dtype=np.int64)
        self.grasp_choice = np.zeros((n, env.arms), dtype=np.int64)
        self.jitter = np.zeros((n, 3))
        self.failed = np.zeros(n, dtype=bool)
        self.fail_phase = [""] * n
        self.fail_residual = np.zeros(n)
        self.done = np.zeros(n, dtype=bool)
        self._enter_phase(np.arange(n))

    def _needle_points(self):
        return self.env._needle_world_grasp_points()

    def _choose_grasp_point(self, idx, arm):
        # Fixed role per arm: the steering arm always takes the arc middle.
        # A state-independent target keeps the demonstrated direction field
        # single-valued, which nearest-point selection would break.
        k = self.env.needle_grasp_local.shape[0]
        self.grasp_choice[idx, arm] = k // 2

    def _enter_phase(self, idx: np.ndarray):
        if idx.size == 0:
            return
        for i in idx.tolist():
            if self.noise > 0:
                self.jitter[i] = self.rngs[i].uniform(-self.noise, self.noise, size=3)
            else:
                self.jitter[i] = 0.0
            name = self.phases[self.phase_idx[i]].name
            if name in ("approach_above", "r_approach"):
                self._choose_grasp_point(np.array([i]), 0)
            elif name == "l_approach":
                # Left always grabs the arc's first end, away from the middle.
                self.grasp_choice[i, 1] = 0

    def _targets(self):
        """Target tip positions (n, A, 3) and jaw commands (n, A)."""
        env = self.env
        n, A = env.n, env.arms
        target = env.tip_pos.copy()              # default: hold pose
        jaw = env.jaw.copy()
        t = env.cfg["task"]
        wp = self._needle_points() if env.has_needle else None
        needle_pos = env.world.obj_pos[:, env.needle_idx] if env.has_needle else None
        # Aim slightly through the grasp point so undershoot still lands
        # inside the grasp radius.
        through = np.array([0.0, 0.0, -0.0015])

        for i in range(n):
            if self.done[i] or self.failed[i]:
                continue
            p = self.phases[self.phase_idx[i]]
            for a in range(A):
                cmd = p.jaw[a]
                if cmd == "descend":
                    # Close continuously with height above the grasp point.
                    gp_a = wp[i, self.grasp_choice[i, a]]
                    dz = env.tip_pos[i, a, 2] - gp_a[2]
                    jaw[i, a] = float(np.clip(0.8 * dz / HOVER, 0.0, 0.8))
                else:
                    jaw[i, a] = cmd
            jit = self.jitter[i]
            name = p.name
            if name in ("approach_above", "r_approach"):
                gp = wp[i, self.grasp_choice[i, 0]]
                target[i, 0] = gp + np.array([0.0, 0.0, HOVER]) + jit
            elif name == "l_approach":
                gp_l = wp[i, self.grasp_choice[i, 1]]
                target[i, 1] = gp_l + np.array([0.0, 0.0, HOVER]) + jit
            elif name in ("descend", "r_descend"):
                gp = wp[i, self.grasp_choice[i, 0]]
                target[i, 0] = gp + through + jit * 0.3
            elif name == "l_descend":
                gp_l = wp[i, self.grasp_choice[i, 1]]
                target[i, 1] = gp_l + through + jit * 0.3
            elif name in ("close_jaw", "r_close"):
                # Keep pressing toward the point until attachment fires.
                target[i, 0] = wp[i, self.grasp_choice[i, 0]] + through
            elif name == "l_close":
                target[i, 1] = wp[i, self.grasp_choice[i, 1]] + through
            elif name == "r_release":
                pass                              # hold pose; only jaws act
            elif name == "lift_to_goal":
                grip_off = env.tip_pos[i, 0] - needle_pos[i]
                target[i, 0] = env.goal_pos[i] + grip_off + jit * 0.5
            elif name == "r_lift_to_transfer":
                tp = np.asarray(t.get("transfer_point", [0.0, 0.0, 0.07])) + self.transfer_off[i]
                grip_off = env.tip_pos[i, 0] - needle_pos[i]
                target[i, 0] = tp + grip_off + jit
            elif name in ("l_to_goal", "l_retreat"):
                grip_off = env.tip_pos[i, 1] - needle_pos[i]
                target[i, 1] = env.goal_pos[i] + grip_off + jit * 0.5
            elif name == "r_pre_ring":
                ring = env.scene.ring
                probe = env.world._probe_point()[i]
                off = env.tip_pos[i, 0] - probe
                target[i, 0] = ring.center - ring.normal * 0.03 + off + jit * 0.5
            elif name == "r_through_ring":
                ring = env.scene.ring
                probe = env.world._probe_point()[i]
                off = env.tip_pos[i, 0] - probe
                target[i, 0] = ring.center + ring.normal * 0.04 + off + jit * 0.5
        return target, jaw

    def _phase_done(self) -> np.ndarray:
        env = self.env
        done = np.zeros(env.n, dtype=bool)
        wp = self._needle_points() if env.has_needle else None
        needle_pos = env.world.obj_pos[:, env.needle_idx] if env.has_needle else None
        t = env.cfg["task"]
        for i in range(env.n):
            if self.done[i] or self.failed[i]:
                continue
            p = self.phases[self.phase_idx[i]]
            name = p.name
            if name in ("approach_above", "r_approach", "l_approach"):
                arm = p.arm
                gp = wp[i, self.grasp_choice[i, arm]]
                ref = gp + np.array([0.0, 0.0, HOVER]) + self.jitter[i]
                done[i] = np.linalg.norm(env.tip_pos[i, arm] - ref) < 0.004
            elif name in ("descend", "r_descend", "l_descend"):
                arm = p.arm
                gp = wp[i, self.grasp_choice[i, arm]]
                # The closing jaw usually attaches on the way down, which
                # freezes the tip-to-point distance; both end the phase.
                attached = env.world.att_obj[i, arm] == env.needle_idx
                done[i] = attached or np.linalg.norm(env.tip_pos[i, arm] - gp) < 0.002
            elif name in ("close_jaw", "r_close"):
                done[i] = env.world.att_obj[i, 0] == env.needle_idx
            elif name == "l_close":
                done[i] = env.world.att_obj[i, 1] == env.needle_idx
            elif name == "r_release":
                done[i] = env.world.att_obj[i, 0] == -1
            elif name == "r_lift_to_transfer":
                tp = np.asarray(t.get("transfer_point", [0.0, 0.0, 0.07])) + self.transfer_off[i]
                done[i] = np.linalg.norm(needle_pos[i] - tp) < 0.006
            elif name == "r_pre_ring":
                ring = env.scene.ring
                probe = env.world._probe_point()[i]
                done[i] = np.linalg.norm(probe - (ring.center - ring.normal * 0.03)) < 0.005
            elif name == "r_through_ring":
                done[i] = env.ring_passed[i]
            # lift_to_goal / l_to_goal / l_retreat end via env success.
        return done

    def actions(self) -> np.ndarray:
        env = self.env
        target, jaw = self._targets()
        acts = np.zeros((env.n, env.action_dim))
        max_dp = env.max_pos_delta
        for a in range(env.arms):
            raw = target[:, a] - env.tip_pos[:, a]
            dist = np.linalg.norm(raw, axis=-1, keepdims=True)
            # Geometric slow-in: half the remaining distance per step, floor
            # 1.5 mm; densifies recorded states near waypoints, where cloned
            # policies need the data.
            cap = np.minimum(max_dp, self.pace * dist + 0.0015)
            dp = raw * np.where(dist > 0, np.minimum(1.0, cap / np.where(dist == 0, 1, dist)), 0.0)
            if self.action_noise > 0:
                # Noise goes into the executed (and recorded) action: the
                # next step's corrective action teaches recovery. Only the
                # arm its phase steers gets noise; a parked arm's recorded
                # action must stay an exact hold, not pure noise.
                steering = np.array([self.phases[self.phase_idx[i]].arm == a
                                     for i in range(env.n)])[:, None]
                noise = np.stack([self.rngs[i].uniform(-self.action_noise, self.action_noise, 3)
                                  for i in range(env.n)])
                dp = dp + np.where(steering, noise, 0.0)
            dp = np.clip(dp, -max_dp, max_dp)
            # Steer the tool back toward the canonical down-pointing frame.
            rot_to_canon = clamp_rotation(quat_conj(env.tip_quat[:, a]), env.max_rot_delta * 0.5)
            acts[:, a * 8:a * 8 + 3] = dp
            acts[:, a * 8 + 3:a * 8 + 7] = rot_to_canon
            acts[:, a * 8 + 7] = jaw[:, a]
        return acts

    def observe_step(self, successes: np.ndarray):
        env = self.env
        self.phase_steps += 1
        self.done |= successes & ~self.failed
        advance = self._phase_done() & ~self.done & ~self.failed
        if np.any(advance):
            idx = np.nonzero(advance)[0]
            self.phase_idx[idx] += 1
            self.phase_steps[idx] = 0
            self._enter_phase(idx)
        live = ~self.done & ~self.failed
        for i in np.nonzero(live)[0]:
            p = self.phases[self.phase_idx[i]]
            if self.phase_steps[i] > p.timeout:
                self.failed[i] = True
                self.fail_phase[i] = p.name
                if env.has_needle:
                    wpts = env._needle_world_grasp_points()[i]
                    self.fail_residual[i] = float(
                        np.min(np.linalg.norm(wpts - env.tip_pos[i, p.arm], axis=-1))
                    )


def generate_demos(task: TaskSpec, count: int, seed: int, noise: float | None = None,
                   cfg: dict | None = None, action_noise: float | None = None):
    """Generate `count` scripted demos; returns (trajectories, failures).

    Deterministic in (task, count, seed, noise, action_noise): env i uses
    RNG stream seed XOR i for scene randomization and an offset stream for
    jitter/noise.
    """
    cfg = cfg if cfg is not None else config_mod.defaults()
    noise = cfg["demos"]["noise"] if noise is None else noise
    if action_noise is None:
        action_noise = cfg["demos"].get("action_noise", 0.0)
    pace = cfg["demos"].get("pace_by_task", {}).get(task.name, cfg["demos"].get("pace", 0.5))
    env = create_batch(task, SPACE_CARTESIAN, count, seed, cfg, auto_reset=False)
    chash = config_mod.config_hash(cfg)
    rec = BatchRecorder(env, [seed ^ i for i in range(count)], chash, task.randomize)
    env.recorder = rec
    jit_rngs = [np.random.Generator(np.random.PCG64((seed + 7919) ^ i)) for i in range(count)]
    ctrl = ScriptedController(env, noise, jit_rngs, action_noise=action_noise, pace=pace)

    max_steps = sum(p.timeout for p in ctrl.phases) + 50
    for _ in range(max_steps):
        acts = ctrl.actions()
        res = env.step(acts)
        ctrl.observe_step(res.successes)
        rec.active = ~(ctrl.done | ctrl.failed)
        if not rec.active.any():
            break

    demos, failures = [], []
    for i in range(count):
        if ctrl.done[i]:
            demos.append(rec.trajectories[i])
        else:
            phase = ctrl.fail_phase[i] or ctrl.phases[ctrl.phase_idx[i]].name
            failures.append(Failed(phase, float(ctrl.fail_residual[i]), i))
    return demos, failures


def generate_demo(task: TaskSpec, seed: int, noise: float | None = None,
                  cfg: dict | None = None):
    """Single-seed generator: Trajectory or Failed."""
    demos, failures = generate_demos(task, 1, seed, noise, cfg)
    return demos[0] if demos else failures[0]


# ------------------------------------------------------------------- replay


class ReplayHashMismatch(ValueError):
    pass


def replay_trajectory(traj: Trajectory, cfg: dict | None = None,
                      allow_hash_mismatch: bool = False, tolerance: float = 1e-9) -> dict:
    """Replay the recorded joint+jaw sequence and compare object poses.

    Returns a report with the max divergence and the first step index
    exceeding `tolerance` (None when within tolerance everywhere).
    """
    cfg = cfg if cfg is not None else config_mod.defaults()
    chash = config_mod.config_hash(cfg)
    hash_matches = chash == traj.header.config_hash
    if not hash_matches and not allow_hash_mismatch:
        raise ReplayHashMismatch(
            f"config hash {chash} does not match trajectory {traj.header.config_hash}"
        )

    task = TaskSpec(traj.header.task, traj.header.randomize)
    env = create_batch(task, traj.header.action_space, 1, traj.header.seed, cfg,
                       auto_reset=False)
    max_div = 0.0
    first_div = None
    for i, s in enumerate(traj.steps):
        env.q[0] = s.q
        env.jaw[0] = s.jaw
        env._refresh_tips(np.array([0]))
        if env.has_needle:
            events = env.world.step(env.tip_pos, env.tip_quat, env.jaw, env.dt)
            env._update_sticky(events)
            div = float(np.max(np.abs(env.world.obj_pos[0] - s.obj_pos)))
            div = max(div, float(np.max(np.abs(env.world.obj_quat[0] - s.obj_quat))))
            if s.rope is not None and env.world.rope_pos is not None:
                div = max(div, float(np.max(np.abs(env.world.rope_pos[0] - s.rope))))
        else:
            div = float(np.max(np.abs(env.tip_pos[0] - s.tip_pos)))
        if div > max_div:
            max_div = div
        if first_div is None and div > tolerance:
            first_div = i
    return {
        "steps": len(traj.steps),
        "hash_matched": hash_matches,
        "max_divergence": max_div,
        "first_divergent_step": first_div,
        "identical": first_div is None,
    }
