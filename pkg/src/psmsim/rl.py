"""PPO with generalized advantage estimation over the vectorized envs."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvBatch, TaskSpec, create_batch
from .policy import (
    Adam,
    Mlp,
    Policy,
    RunningNormalizer,
    clip_grads_global,
    save_checkpoint,
    value_net,
)

log = logging.getLogger(__name__)


class TrainingFault(RuntimeError):
    """Non-finite loss; the update is aborted and reported, never applied."""


@dataclass
class RolloutBuffer:
    """Per (step, env) arrays; full before an update, cleared after."""

    obs: np.ndarray        # (T, n, obs_dim), already normalized
    actions: np.ndarray    # (T, n, act_dim)
    log_probs: np.ndarray  # (T, n)
    rewards: np.ndarray    # (T, n)
    dones: np.ndarray      # (T, n)
    values: np.ndarray     # (T, n)


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                last_values: np.ndarray, gamma: float, lam: float):
    """delta_t = r_t + gamma*V(s_{t+1})*(1-done_t) - V(s_t);
    A_t = delta_t + gamma*lam*(1-done_t)*A_{t+1}; returns = A + V."""
    T, n = rewards.shape
    adv = np.zeros((T, n))
    next_value = last_values
    running = np.zeros(n)
    for t in range(T - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        running = delta + gamma * lam * not_done * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def collect_rollout(env: EnvBatch, policy: Policy, value: Mlp,
                    normalizer: RunningNormalizer, T: int,
                    rng: np.random.Generator, obs: np.ndarray):
    """Run T steps; returns (buffer, last_values, raw final obs, success count)."""
    n = env.n
    buf_obs = np.empty((T, n, env.obs_dim))
    buf_act = np.empty((T, n, env.action_dim))
    buf_lp = np.empty((T, n))
    buf_rew = np.empty((T, n))
    buf_done = np.empty((T, n))
    buf_val = np.empty((T, n))
    successes = 0
    raw = np.empty((T, n, env.obs_dim))
    for t in range(T):
        norm_obs = normalizer.normalize(obs)
        action, lp = policy.sample(norm_obs, rng)
        v = value(norm_obs)[:, 0]
        res = env.step(action)
        raw[t] = obs
        buf_obs[t] = norm_obs
        buf_act[t] = action
        buf_lp[t] = lp
        buf_val[t] = v
        buf_rew[t] = res.rewards
        buf_done[t] = res.dones
        successes += int(res.successes.sum())
        obs = res.observations
    last_values = value(normalizer.normalize(obs))[:, 0]
    buffer = RolloutBuffer(buf_obs, buf_act, buf_lp, buf_rew, buf_done, buf_val)
    # Stats updated after the rollout so stored normalized obs stay consistent.
    normalizer.update(raw.reshape(-1, env.obs_dim))
    return buffer, last_values, obs, successes


def ppo_loss_and_grads(policy: Policy, value: Mlp, obs, actions, log_probs_old,
                       advantages, returns, cfg: dict):
    """Total clipped-surrogate loss and analytic grads for both networks.

    Returns (loss, policy_grads, value_grads, metrics). Gradients are of the
    scalar total loss: surrogate + value_coef*MSE - entropy_coef*entropy.
    """
    B = obs.shape[0]
    clip_eps = cfg["clip_eps"]
    mu, acts_cache = policy.net.forward(obs)
    lp = policy.log_prob_given_mean(mu, actions)
    ratio = np.exp(lp - log_probs_old)
    surr1 = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surr2 = clipped * advantages
    take_unclipped = surr1 <= surr2
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    entropy = policy.entropy()

    v_out, v_cache = value.forward(obs)
    v = v_out[:, 0]
    value_loss = np.mean((v - returns) ** 2)

    total = policy_loss + cfg["value_coef"] * value_loss - cfg["entropy_coef"] * entropy
    if not np.isfinite(total):
        raise TrainingFault(
            f"non-finite loss (policy={policy_loss}, value={value_loss})"
        )

    # d total / d lp: only the unclipped branch carries gradient.
    g_lp = np.where(take_unclipped, -ratio * advantages, 0.0) / B
    std2 = np.exp(2.0 * policy.log_std)
    diff = actions - mu
    # d lp / d mu = diff / sigma^2; d lp / d log_std = diff^2/sigma^2 - 1.
    g_mu = g_lp[:, None] * diff / std2
    g_log_std = np.sum(g_lp[:, None] * ((diff ** 2) / std2 - 1.0), axis=0)
    g_log_std = g_log_std - cfg["entropy_coef"] * np.ones_like(policy.log_std)
    policy_grads = policy.net.backward(acts_cache, g_mu)
    policy_grads["log_std"] = g_log_std

    g_v = (cfg["value_coef"] * 2.0 * (v - returns) / B)[:, None]
    value_grads = value.backward(v_cache, g_v)

    metrics = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "kl": float(np.mean(log_probs_old - lp)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "total_loss": float(total),
    }
    return total, policy_grads, value_grads, metrics


def ppo_update(policy: Policy, value: Mlp, buffer: RolloutBuffer,
               last_values: np.ndarray, cfg: dict,
               policy_opt: Adam, value_opt: Adam, rng: np.random.Generator) -> dict:
    """One PPO update over a full buffer; returns averaged metrics."""
    T, n = buffer.rewards.shape
    adv, returns = compute_gae(buffer.rewards, buffer.values, buffer.dones,
                               last_values, cfg["gamma"], cfg["gae_lambda"])
    flat = lambda x: x.reshape(T * n, *x.shape[2:])
    obs, actions = flat(buffer.obs), flat(buffer.actions)
    lp_old, adv_f, ret_f = flat(buffer.log_probs), flat(adv), flat(returns)
    # Advantages normalized to mean 0, std 1 within the batch (update pre).
    adv_f = (adv_f - adv_f.mean()) / (adv_f.std() + 1e-8)

    B = T * n
    mb = max(1, B // cfg["minibatches"])
    agg: dict[str, float] = {}
    count = 0
    for _ in range(cfg["epochs_per_update"]):
        order = rng.permutation(B)
        for start in range(0, B, mb):
            idx = order[start:start + mb]
            _, pg, vg, metrics = ppo_loss_and_grads(
                policy, value, obs[idx], actions[idx], lp_old[idx],
                adv_f[idx], ret_f[idx], cfg,
            )
            clip_grads_global([pg, vg], cfg["max_grad_norm"])
            # In-place Adam update; log_std rides along in the policy dict.
            policy_params = {**policy.net.params, "log_std": policy.log_std}
            policy_opt.step(policy_params, pg)
            policy.clamp_log_std()
            value_opt.step(value.params, vg)
            for k, v_ in metrics.items():
                agg[k] = agg.get(k, 0.0) + v_
            count += 1
    return {k: v / count for k, v in agg.items()}


@dataclass
class TrainResult:
    policy: Policy
    value: Mlp
    normalizer: RunningNormalizer
    curve: list[dict]
    env_steps: int
    updates: int
    best_success: float


def evaluate(policy: Policy, normalizer: RunningNormalizer, task: TaskSpec,
             action_space: str, trials: int, seed: int, cfg_all: dict,
             recorder_factory=None) -> float:
    """Frozen-policy success rate over `trials` single-episode envs."""
    env = create_batch(task, action_space, trials, seed, cfg_all, auto_reset=False)
    if recorder_factory is not None:
        env.recorder = recorder_factory(env)
    obs = env.observe()
    succeeded = np.zeros(trials, dtype=bool)
    done = np.zeros(trials, dtype=bool)
    for _ in range(env.horizon):
        action = policy.mean(normalizer.normalize(obs))
        res = env.step(action)
        succeeded |= res.successes
        done |= res.dones
        obs = res.observations
        if done.all():
            break
    return float(succeeded.mean())


def train(task: TaskSpec, cfg_all: dict, n_envs: int, seed: int,
          wall_clock_budget_s: float, out_dir: str | Path | None = None,
          action_space: str = "cartesian_quat", target_success: float | None = None,
          max_updates: int | None = None, eval_trials: int | None = None,
          log_every: int = 0) -> TrainResult:
    """PPO training loop with periodic frozen-policy evaluation.

    The learning curve (wall_time_s, env_steps, success_rate) is appended to
    out_dir/curve.jsonl and checkpoints are written atomically.
    """
    rl = cfg_all["rl"]
    env = create_batch(task, action_space, n_envs, seed, cfg_all)
    policy = Policy.create(env.obs_dim, env.action_dim, rl["hidden"], seed=seed + 1,
                           log_std_init=rl["log_std_init"])
    value = value_net(env.obs_dim, rl["hidden"], seed=seed + 2)
    normalizer = RunningNormalizer(env.obs_dim)
    policy_opt = Adam(rl["learning_rate"])
    value_opt = Adam(rl["learning_rate"])
    rng = np.random.Generator(np.random.PCG64(seed + 3))
    trials = eval_trials if eval_trials is not None else rl["eval_trials"]

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        curve_path = out_dir / "curve.jsonl"
        curve_path.write_text("")

    obs = env.observe()
    curve: list[dict] = []
    env_steps = 0
    updates = 0
    best = 0.0
    t0 = time.perf_counter()
    while True:
        buffer, last_values, obs, _ = collect_rollout(
            env, policy, value, normalizer, rl["rollout_length"], rng, obs)
        env_steps += rl["rollout_length"] * n_envs
        ppo_update(policy, value, buffer, last_values, rl, policy_opt, value_opt, rng)
        updates += 1

        if updates % rl["eval_interval_updates"] == 0:
            rate = evaluate(policy, normalizer, task, action_space, trials,
                            seed=seed + 1000 + updates, cfg_all=cfg_all)
            best = max(best, rate)
            rec = {
                "wall_time_s": time.perf_counter() - t0,
                "env_steps": env_steps,
                "success_rate": rate,
            }
            curve.append(rec)
            if log_every and updates % log_every == 0:
                log.info("update %d: %s", updates, rec)
            if out_dir:
                with open(curve_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")
                save_checkpoint(out_dir / f"ckpt_{updates:06d}.npz", policy, value,
                                normalizer, meta={"task": task.name, "updates": updates,
                                                  "env_steps": env_steps,
                                                  "success_rate": rate})
            if target_success is not None and rate >= target_success:
                break
        if time.perf_counter() - t0 > wall_clock_budget_s:
            break
        if max_updates is not None and updates >= max_updates:
            break

    if out_dir:
        save_checkpoint(out_dir / "ckpt_final.npz", policy, value, normalizer,
                        meta={"task": task.name, "updates": updates,
                              "env_steps": env_steps, "best_success": best})
    return TrainResult(policy, value, normalizer, curve, env_steps, updates, best)
