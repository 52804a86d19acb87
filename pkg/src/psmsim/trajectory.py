"""The canonical per-step record for demos, teleop recordings, and replay.

File format: line-delimited JSON, one header line then one line per step.
Python's json writes floats with shortest-round-trip repr, so parse(serialize)
is bit-lossless for every finite float64 — replay determinism depends on it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAJECTORY_VERSION = 1


class TrajectoryError(ValueError):
    pass


@dataclass
class TrajectoryHeader:
    task: str
    action_space: str
    obs_layout_version: int
    seed: int
    config_hash: str
    dt: float
    arms: int
    objects: list[str] = field(default_factory=list)
    rope_particles: int = 0
    randomize: str = "IG"
    format_version: int = TRAJECTORY_VERSION

    def to_json(self) -> dict:
        return {
            "kind": "trajectory_header",
            "format_version": self.format_version,
            "task": self.task,
            "action_space": self.action_space,
            "obs_layout_version": self.obs_layout_version,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "dt": self.dt,
            "arms": self.arms,
            "objects": self.objects,
            "rope_particles": self.rope_particles,
            "randomize": self.randomize,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrajectoryHeader":
        if doc.get("kind") != "trajectory_header":
            raise TrajectoryError("first line is not a trajectory header")
        if doc.get("format_version") != TRAJECTORY_VERSION:
            raise TrajectoryError(f"unsupported trajectory format_version {doc.get('format_version')!r}")
        return cls(
            task=doc["task"],
            action_space=doc["action_space"],
            obs_layout_version=doc["obs_layout_version"],
            seed=doc["seed"],
            config_hash=doc["config_hash"],
            dt=doc["dt"],
            arms=doc["arms"],
            objects=list(doc.get("objects", [])),
            rope_particles=int(doc.get("rope_particles", 0)),
            randomize=doc.get("randomize", "IG"),
        )


@dataclass
class TrajectoryStep:
    t: float
    q: np.ndarray          # (arms, 6)
    tip_pos: np.ndarray    # (arms, 3)
    tip_quat: np.ndarray   # (arms, 4)
    jaw: np.ndarray        # (arms,)
    action: np.ndarray     # (action_dim,)
    obs: np.ndarray        # (obs_dim,) — what the actor saw BEFORE `action`
                           # (poses/joints in this record are post-step)
    obj_pos: np.ndarray    # (n_obj, 3)
    obj_quat: np.ndarray   # (n_obj, 4)
    rope: np.ndarray | None        # (k, 3) or None
    events: dict           # grasp: [arms], release: [arms], ring_pass, success

    def to_json(self) -> dict:
        doc = {
            "t": self.t,
            "q": self.q.tolist(),
            "tip_pos": self.tip_pos.tolist(),
            "tip_quat": self.tip_quat.tolist(),
            "jaw": self.jaw.tolist(),
            "action": self.action.tolist(),
            "obs": self.obs.tolist(),
            "obj_pos": self.obj_pos.tolist(),
            "obj_quat": self.obj_quat.tolist(),
            "events": self.events,
        }
        if self.rope is not None:
            doc["rope"] = self.rope.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrajectoryStep":
        return cls(
            t=float(doc["t"]),
            q=np.asarray(doc["q"], dtype=np.float64),
            tip_pos=np.asarray(doc["tip_pos"], dtype=np.float64),
            tip_quat=np.asarray(doc["tip_quat"], dtype=np.float64),
            jaw=np.asarray(doc["jaw"], dtype=np.float64),
            action=np.asarray(doc["action"], dtype=np.float64),
            obs=np.asarray(doc["obs"], dtype=np.float64),
            obj_pos=np.asarray(doc["obj_pos"], dtype=np.float64),
            obj_quat=np.asarray(doc["obj_quat"], dtype=np.float64),
            rope=np.asarray(doc["rope"], dtype=np.float64) if "rope" in doc else None,
            events=doc["events"],
        )


@dataclass
class Trajectory:
    header: TrajectoryHeader
    steps: list[TrajectoryStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def succeeded(self) -> bool:
        return bool(self.steps) and bool(self.steps[-1].events.get("success"))

    def observations(self) -> np.ndarray:
        return np.stack([s.obs for s in self.steps])

    def actions(self) -> np.ndarray:
        return np.stack([s.action for s in self.steps])

    def joint_view(self) -> np.ndarray:
        """Per-step (arms * 7) joints+jaw export for external replay."""
        return np.stack([np.concatenate([s.q, s.jaw[:, None]], axis=1).ravel() for s in self.steps])

    def serialize(self) -> str:
        lines = [json.dumps(self.header.to_json())]
        lines.extend(json.dumps(s.to_json()) for s in self.steps)
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Trajectory":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise TrajectoryError("empty trajectory document")
        try:
            header = TrajectoryHeader.from_json(json.loads(lines[0]))
            steps = [TrajectoryStep.from_json(json.loads(ln)) for ln in lines[1:]]
        except (json.JSONDecodeError, KeyError) as exc:
            raise TrajectoryError(f"malformed trajectory: {exc}") from exc
        return cls(header, steps)

    def save(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.serialize(), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


def validate_trajectory(traj: Trajectory, cfg: dict | None = None) -> list[str]:
    """Schema checks shared by scripted demos and teleop recordings.

    Returns a list of problems (empty = valid): timestamps must advance by
    dt, shapes must match the header, and event flags must be consistent
    with the recorded state they annotate.
    """
    problems = []
    h = traj.header
    dt = h.dt
    for i, s in enumerate(traj.steps):
        expected_t = i * dt
        if s.t != expected_t:
            problems.append(f"step {i}: t={s.t!r}, expected {expected_t!r}")
            break
    for i, s in enumerate(traj.steps):
        if s.q.shape != (h.arms, 6) or s.jaw.shape != (h.arms,):
            problems.append(f"step {i}: joint/jaw shape mismatch for {h.arms} arms")
            break
        if s.obj_pos.shape[0] != len(h.objects):
            problems.append(f"step {i}: {s.obj_pos.shape[0]} object poses, header lists {len(h.objects)}")
            break
        if h.rope_particles and (s.rope is None or s.rope.shape[0] != h.rope_particles):
            problems.append(f"step {i}: rope polyline missing or wrong length")
            break
        ev = s.events
        if not (isinstance(ev.get("grasp"), list) and len(ev["grasp"]) == h.arms):
            problems.append(f"step {i}: grasp event flags malformed")
            break
    if cfg is not None:
        # Grasp flag implies the grasp predicate held: jaw below the close
        # threshold at the flagged step.
        close = cfg["sim"]["grasp_close_jaw"]
        for i, s in enumerate(traj.steps):
            for a in range(h.arms):
                if s.events["grasp"][a] and not s.jaw[a] < close:
                    problems.append(f"step {i}: grasp flag on arm {a} with jaw {s.jaw[a]}")
    return problems


class EnvRecorder:
    """Attachable env hook that appends one TrajectoryStep per env step.

    Records env 0 of the batch (recording is per-episode, single-env).
    """

    def __init__(self, env, seed: int, config_hash: str, randomize: str = "IG"):
        from .envs import OBS_LAYOUT_VERSION

        self.env = env
        self.trajectory = Trajectory(TrajectoryHeader(
            task=env.task.name,
            action_space=env.action_space,
            obs_layout_version=OBS_LAYOUT_VERSION,
            seed=seed,
            config_hash=config_hash,
            dt=env.dt,
            arms=env.arms,
            objects=[o.id for o in env.scene.objects],
            rope_particles=env.scene.rope.n_particles if env.scene.rope else 0,
            randomize=randomize,
        ))

    def record(self, env, actions: np.ndarray, events: dict, obs_before: np.ndarray):
        i = len(self.trajectory.steps)
        w = env.world
        self.trajectory.steps.append(TrajectoryStep(
            t=i * env.dt,
            q=env.q[0].copy(),
            tip_pos=env.tip_pos[0].copy(),
            tip_quat=env.tip_quat[0].copy(),
            jaw=env.jaw[0].copy(),
            action=actions[0].copy(),
            obs=obs_before[0].copy(),
            obj_pos=w.obj_pos[0].copy() if env.has_needle else np.zeros((0, 3)),
            obj_quat=w.obj_quat[0].copy() if env.has_needle else np.zeros((0, 4)),
            rope=w.rope_pos[0].copy() if w.rope_pos is not None else None,
            events={
                "grasp": events["grasp"][0].tolist(),
                "release": events["release"][0].tolist(),
                "ring_pass": bool(events["ring_pass"][0]),
                "success": bool(events["success"][0]),
            },
        ))
