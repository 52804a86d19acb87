"""Behavior cloning from demonstration trajectories and staged policy chaining."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .envs import SPACE_CARTESIAN, TASK_HANDOVER, EnvBatch, TaskSpec, create_batch
from .policy import Adam, Policy, RunningNormalizer
from .trajectory import Trajectory

log = logging.getLogger(__name__)

# Stage names for the long-horizon handover decomposition.
STAGE_LIFT = "lift"
STAGE_HANDOVER = "handover"
STAGE_REACH = "reach"
HANDOVER_STAGES = (STAGE_LIFT, STAGE_HANDOVER, STAGE_REACH)


class DatasetError(ValueError):
    pass


@dataclass
class DemoDataset:
    """Flattened (obs, action) pairs over a set of same-layout trajectories."""

    obs: np.ndarray
    actions: np.ndarray
    normalizer: RunningNormalizer
    task: str
    action_space: str
    index: list[tuple[int, int]] = field(default_factory=list)  # (traj, step)

    @classmethod
    def from_trajectories(cls, trajectories: list[Trajectory]) -> "DemoDataset":
        if not trajectories:
            raise DatasetError("empty demonstration set")
        trajectories = [t for t in trajectories if len(t) > 0]
        if not trajectories:
            raise DatasetError("all trajectories empty")
        h0 = trajectories[0].header
        obs_list, act_list, index = [], [], []
        for ti, traj in enumerate(trajectories):
            h = traj.header
            if (h.task, h.action_space, h.obs_layout_version) != \
                    (h0.task, h0.action_space, h0.obs_layout_version):
                raise DatasetError(
                    f"trajectory {ti} layout ({h.task}, {h.action_space}) does not match "
                    f"({h0.task}, {h0.action_space})"
                )
            obs_list.append(traj.observations())
            act_list.append(traj.actions())
            index.extend((ti, si) for si in range(len(traj)))
        obs = np.concatenate(obs_list)
        actions = np.concatenate(act_list)
        norm = RunningNormalizer(obs.shape[1])
        norm.update(obs)     # stats computed on the training split only
        return cls(obs, actions, norm, h0.task, h0.action_space, index)

    def __len__(self) -> int:
        return self.obs.shape[0]

    def action_scales(self) -> np.ndarray:
        """Static per-channel scales: meter deltas are worth ~max_pos_delta,
        quaternion and jaw channels ~1. Physical scoping instead of data
        std keeps near-constant channels from being amplified into pure
        noise targets."""
        if self.action_space != "cartesian_quat":
            return np.ones(self.actions.shape[1])
        arms = self.actions.shape[1] // 8
        per_arm = np.array([0.01, 0.01, 0.01, 1.0, 1.0, 1.0, 1.0, 1.0])
        return np.tile(per_arm, arms)


def bc_loss_and_grads(policy: Policy, obs_norm: np.ndarray, actions: np.ndarray):
    """Mean-squared error between the policy mean and demo actions, with
    analytic gradients for the policy network."""
    mu, cache = policy.net.forward(obs_norm)
    diff = mu - actions
    loss = float(np.mean(diff * diff))
    g_mu = 2.0 * diff / diff.size
    grads = policy.net.backward(cache, g_mu)
    return loss, grads


def train_bc(dataset: DemoDataset, epochs: int | None = None, lr: float | None = None,
             batch: int | None = None, seed: int = 0, cfg: dict | None = None,
             hidden: list[int] | None = None):
    """Train a BC policy; deterministic given seed.

    Returns (policy, normalizer, loss_per_epoch).
    """
    cfg = cfg if cfg is not None else config_mod.defaults()
    bc = cfg["bc"]
    epochs = epochs if epochs is not None else bc["epochs"]
    lr = lr if lr is not None else bc["learning_rate"]
    batch = batch if batch is not None else bc["batch_size"]
    hidden = hidden if hidden is not None else cfg["rl"]["hidden"]

    obs_dim, act_dim = dataset.obs.shape[1], dataset.actions.shape[1]
    policy = Policy.create(obs_dim, act_dim, hidden, seed=seed,
                           log_std_init=cfg["rl"]["log_std_init"])
    opt = Adam(lr)
    rng = np.random.Generator(np.random.PCG64(seed + 17))
    obs_norm = dataset.normalizer.normalize(dataset.obs)
    act_scale = dataset.action_scales()
    targets = dataset.actions / act_scale
    n = len(dataset)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        count = 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, grads = bc_loss_and_grads(policy, obs_norm[idx], targets[idx])
            opt.step(policy.net.params, grads)
            epoch_loss += loss * idx.size
            count += idx.size
        losses.append(epoch_loss / count)
    # Fold the de-scaling into the output layer so the policy emits raw
    # actions and shares the RL checkpoint format unchanged.
    last = policy.net.n_layers - 1
    policy.net.params[f"W{last}"] = policy.net.params[f"W{last}"] * act_scale
    policy.net.params[f"b{last}"] = policy.net.params[f"b{last}"] * act_scale
    return policy, dataset.normalizer, losses


# ----------------------------------------------------------- staged policies


def stage_lift_done(env: EnvBatch) -> np.ndarray:
    """Lift -> Handover: right grasp established and needle above threshold."""
    z_thresh = float(env.cfg["task"].get("handover_lift_z", 0.05))
    right_holds = env.world.att_obj[:, 0] == env.needle_idx
    return right_holds & (env.world.obj_pos[:, env.needle_idx, 2] > z_thresh)


def stage_handover_done(env: EnvBatch) -> np.ndarray:
    """Handover -> Reach: left grasp established and right released."""
    left_holds = env.world.att_obj[:, 1] == env.needle_idx
    right_free = env.world.att_obj[:, 0] != env.needle_idx
    return left_holds & right_free


STAGE_PREDICATES = {
    STAGE_LIFT: stage_lift_done,
    STAGE_HANDOVER: stage_handover_done,
}


@dataclass
class StagedPolicy:
    """Ordered sub-policies with transition predicates; stages advance
    monotonically, the last stage runs until the episode ends."""

    stages: list[tuple[Policy, RunningNormalizer]]
    predicates: list   # callables env -> (n,) bool; len == len(stages) - 1

    def __post_init__(self):
        if len(self.predicates) != len(self.stages) - 1:
            raise ValueError("need exactly one transition predicate between stages")


def _policy_actions(policy: Policy, normalizer: RunningNormalizer, obs: np.ndarray) -> np.ndarray:
    return policy.mean(normalizer.normalize(obs))


def chain_execute(staged: StagedPolicy, env: EnvBatch):
    """Run the staged policy on a batch; returns (successes, stage_reached)."""
    n = env.n
    stage = np.zeros(n, dtype=np.int64)
    succeeded = np.zeros(n, dtype=bool)
    finished = np.zeros(n, dtype=bool)
    obs = env.observe()
    for _ in range(env.horizon):
        actions = np.zeros((n, env.action_dim))
        for s, (pol, norm) in enumerate(staged.stages):
            mask = (stage == s) & ~finished
            if np.any(mask):
                actions[mask] = _policy_actions(pol, norm, obs[mask])
        res = env.step(actions)
        obs = res.observations
        succeeded |= res.successes
        finished |= res.dones
        for s, pred in enumerate(staged.predicates):
            fired = (stage == s) & pred(env) & ~finished
            stage[fired] = s + 1
        if finished.all():
            break
    return succeeded, stage


def evaluate_policy(policy, task: TaskSpec, n_trials: int, seed: int,
                    cfg: dict | None = None, normalizer: RunningNormalizer | None = None,
                    record_dir: str | Path | None = None):
    """Frozen-policy evaluation: returns (success_rate, per-trial log).

    `policy` is either a Policy (with `normalizer`) or a StagedPolicy.
    Trials run as one batch of single-episode envs; per-trial logs are
    replayable Trajectories when record_dir is given (env 0 only).
    """
    cfg = cfg if cfg is not None else config_mod.defaults()
    env = create_batch(task, SPACE_CARTESIAN, n_trials, seed, cfg, auto_reset=False)
    recorder = None
    if record_dir is not None:
        from .trajectory import EnvRecorder

        recorder = EnvRecorder(env, seed, config_mod.config_hash(cfg), task.randomize)
        env.recorder = recorder

    if isinstance(policy, StagedPolicy):
        succeeded, stage = chain_execute(policy, env)
        trial_log = [{"trial": i, "success": bool(succeeded[i]), "stage_reached": int(stage[i])}
                     for i in range(n_trials)]
    else:
        if normalizer is None:
            raise ValueError("plain Policy evaluation needs its normalizer")
        obs = env.observe()
        succeeded = np.zeros(n_trials, dtype=bool)
        finished = np.zeros(n_trials, dtype=bool)
        for _ in range(env.horizon):
            res = env.step(_policy_actions(policy, normalizer, obs))
            obs = res.observations
            succeeded |= res.successes
            finished |= res.dones
            if finished.all():
                break
        trial_log = [{"trial": i, "success": bool(succeeded[i])} for i in range(n_trials)]

    if recorder is not None:
        recorder.trajectory.save(Path(record_dir) / f"eval_{task.name}_seed{seed}.jsonl")
    return float(np.mean(succeeded)), trial_log


# ---------------------------------------------------------------- segmenting


class UnsplittableError(ValueError):
    pass


def segment_demo(traj: Trajectory, cfg: dict | None = None) -> dict[str, Trajectory]:
    """Split a NeedleHandover demo at the stage-transition predicates.

    Uses the same conditions as StagedPolicy, reconstructed from the recorded
    state: right/left attachment tracked through grasp/release event flags,
    needle height from object poses. Concatenating the returned segments
    reproduces the original step sequence exactly.
    """
    cfg = cfg if cfg is not None else config_mod.defaults()
    if traj.header.task != TASK_HANDOVER:
        raise UnsplittableError(f"segmentation is defined for {TASK_HANDOVER}, got {traj.header.task}")
    z_thresh = float(cfg["task"].get("handover_lift_z", 0.05))
    needle = traj.header.objects.index("needle")

    holds = np.zeros(2, dtype=bool)
    lift_end = None
    handover_end = None
    for i, s in enumerate(traj.steps):
        for a in range(2):
            if s.events["grasp"][a]:
                holds[a] = True
            if s.events["release"][a]:
                holds[a] = False
        needle_z = s.obj_pos[needle, 2]
        if lift_end is None and holds[0] and needle_z > z_thresh:
            lift_end = i + 1
        elif lift_end is not None and handover_end is None and holds[1] and not holds[0]:
            handover_end = i + 1
    if lift_end is None or handover_end is None:
        raise UnsplittableError(
            f"missing stage events (lift boundary: {lift_end}, handover boundary: {handover_end})"
        )

    bounds = [(0, lift_end), (lift_end, handover_end), (handover_end, len(traj.steps))]
    out = {}
    for name, (a, b) in zip(HANDOVER_STAGES, bounds):
        seg = Trajectory(traj.header, traj.steps[a:b])
        out[name] = seg
    return out


def build_staged_policy(stage_datasets: dict[str, DemoDataset], seed: int = 0,
                        cfg: dict | None = None) -> StagedPolicy:
    """Train one BC sub-policy per handover stage and chain them."""
    stages = []
    for k, name in enumerate(HANDOVER_STAGES):
        policy, norm, _ = train_bc(stage_datasets[name], seed=seed + k, cfg=cfg)
        stages.append((policy, norm))
    return StagedPolicy(stages, [STAGE_PREDICATES[STAGE_LIFT], STAGE_PREDICATES[STAGE_HANDOVER]])
