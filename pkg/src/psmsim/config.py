"""Run configuration: defaults, task-file overlay, flag overrides, hashing.

Layering is defaults < task file < explicit overrides; the resolved mapping
is dumped next to every output artifact together with its hash so results
stay reproducible. All physical thresholds (grasp radius, success distances,
reward shaping, randomization boxes) live here — they are project
configuration, not measured ground truth.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

VERSION = "0.1.0"


def defaults() -> dict:
    return {
        "robot": {
            "description_path": None,        # None = bundled psm_default.yaml
        },
        "sim": {
            "dt": 0.01,                      # seconds per step
            "gravity": 9.81,
            "ground_z": 0.0,
            "grasp_radius": 0.003,           # jaw tip to grasp point, meters
            "grasp_close_jaw": 0.25,         # jaw below this may grasp
            "release_open_jaw": 0.5,         # jaw above this releases
            "rope_iterations": 20,
            "rope_damping": 0.995,
        },
        "action": {
            "max_pos_delta": 0.01,           # per-step Cartesian clamp, meters
            "max_rot_delta": 0.1,            # per-step rotation clamp, radians
            "joint_rate_limit": 0.05,        # per-step joint-space clamp
        },
        "ik": {
            "method": "dls",
            "lambda": 0.05,
            "alpha": 1.0,
            "sigma_threshold": 0.02,
            "step_clamp": 0.05,
            "pos_tol": 1e-4,
            "rot_tol": 1e-3,
            "max_iters": 200,
        },
        "task": {
            "horizon": 300,
            "reach_tol": 0.005,              # success distance, meters
            "reach_rot_weight": 0.05,
            "success_bonus": 10.0,
            "grasp_bonus": 1.0,
            "reward_bound": 20.0,
            "table_half_extent": 0.05,       # 10 cm x 10 cm randomization region
            "goal_z_range": [0.03, 0.1],     # NeedleLift/Handover goal height band
            "reach_goal_z_range": [0.02, 0.12],
            "lift_min_goal_height": 0.025,
            "arm_base_single": [0.0, 0.0, 0.25],
            "arm_base_right": [0.09, 0.0, 0.25],
            "arm_base_left": [-0.09, 0.0, 0.25],
            "home_q": [0.0, 0.0, 0.08, 0.0, 0.0, 0.0],
            "needle": {
                "arc_radius": 0.012,
                "arc_angle": 3.141592653589793,
                "wire_radius": 0.0004,
                "grasp_point_count": 9,
            },
            "ring": {
                "center": [0.0, 0.05, 0.05],
                "normal": [1.0, 0.0, 0.0],
                "radius": 0.015,
            },
            "rope": {
                "particles": 10,
                "rest_length": 0.008,
                "iterations": 20,
            },
        },
        "rl": {
            "gamma": 0.99,
            "gae_lambda": 0.95,
            "clip_eps": 0.2,
            "learning_rate": 3e-4,
            "epochs_per_update": 5,
            "minibatches": 4,
            "rollout_length": 32,
            "entropy_coef": 0.0,
            "value_coef": 0.5,
            "max_grad_norm": 1.0,
            "hidden": [128, 128],
            "log_std_init": -1.5,
            "eval_trials": 50,
            "eval_interval_updates": 10,
        },
        "bc": {
            "epochs": 40,
            "learning_rate": 1e-3,
            "batch_size": 256,
            "demo_counts": [100, 500, 1000],
        },
        "demos": {
            "noise": 0.002,                  # waypoint jitter, meters
            "action_noise": 0.003,           # per-step injected action noise, meters
            "pace": 0.5,                     # fraction of remaining distance per step
            "pace_by_task": {"needle_handover": 0.3, "threaded_needle_pass_ring": 0.3},
            "transfer_jitter": 0.01,         # per-demo transfer-point variation
        },
        "teleop": {
            "tick_rate": 50.0,
            "snapshot_queue": 8,             # per-client outbound, drop-oldest
        },
        "bench": {
            "env_counts": [1, 64, 1024, 4096],
            "steps": 100,
        },
    }


def deep_update(base: dict, overlay: dict) -> dict:
    for key, val in overlay.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            deep_update(base[key], val)
        else:
            base[key] = val
    return base


def resolve(task_file: str | None = None, overrides: dict | None = None) -> dict:
    cfg = defaults()
    if task_file:
        with open(task_file, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        if doc is not None:
            if not isinstance(doc, dict):
                raise ValueError(f"task file {task_file} must contain a mapping")
            deep_update(cfg, doc)
    if overrides:
        deep_update(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def dump_resolved(cfg: dict, out_dir: str | Path) -> Path:
    """Write the resolved config (with its own hash and tool version) to out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = copy.deepcopy(cfg)
    meta = {"config_hash": config_hash(cfg), "version": VERSION}
    path = out_dir / "resolved_config.yaml"
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        yaml.safe_dump({"meta": meta, "config": payload}, fh, sort_keys=True)
    tmp.replace(path)
    return path
