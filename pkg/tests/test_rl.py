import numpy as np
import pytest

from psmsim import config as config_mod
from psmsim.envs import SPACE_CARTESIAN, TASK_REACH, TaskSpec, create_batch
from psmsim.policy import (
    Adam,
    Mlp,
    Policy,
    RunningNormalizer,
    load_checkpoint,
    save_checkpoint,
    value_net,
)
from psmsim.rl import (
    RolloutBuffer,
    collect_rollout,
    compute_gae,
    ppo_loss_and_grads,
    ppo_update,
)

# ------------------------------------------------------------------ GAE


def gae_bruteforce(rewards, values, dones, last_values, gamma, lam):
    """Direct exponentially-weighted sum of TD residuals (the oracle)."""
    T, n = rewards.shape
    v_next = np.concatenate([values[1:], last_values[None]], axis=0)
    delta = rewards + gamma * v_next * (1 - dones) - values
    adv = np.zeros((T, n))
    for t in range(T):
        acc = np.zeros(n)
        coef = np.ones(n)
        for k in range(t, T):
            acc += coef * delta[k]
            coef = coef * gamma * lam * (1 - dones[k])
            if not coef.any():
                break
        adv[t] = acc
    return adv


def random_buffer(T=5, n=3, seed=0):
    rng = np.random.default_rng(seed)
    rewards = rng.standard_normal((T, n))
    values = rng.standard_normal((T, n))
    dones = (rng.random((T, n)) < 0.2).astype(float)
    last = rng.standard_normal(n)
    return rewards, values, dones, last


def test_gae_lambda_zero_is_td_residual():
    rewards, values, dones, last = random_buffer()
    adv, _ = compute_gae(rewards, values, dones, last, 0.9, 0.0)
    v_next = np.concatenate([values[1:], last[None]], axis=0)
    delta = rewards + 0.9 * v_next * (1 - dones) - values
    np.testing.assert_allclose(adv, delta, atol=1e-12)


def test_gae_single_step_identity():
    rewards = np.array([[1.5]])
    values = np.array([[0.7]])
    dones = np.array([[0.0]])
    last = np.array([2.0])
    adv, ret = compute_gae(rewards, values, dones, last, 1.0, 1.0)
    assert abs(adv[0, 0] - (1.5 + 2.0 - 0.7)) < 1e-12
    assert abs(ret[0, 0] - (adv[0, 0] + 0.7)) < 1e-12


def test_gae_matches_bruteforce_oracle():
    for seed in range(5):
        rewards, values, dones, last = random_buffer(T=5, n=4, seed=seed)
        adv, ret = compute_gae(rewards, values, dones, last, 0.97, 0.93)
        expected = gae_bruteforce(rewards, values, dones, last, 0.97, 0.93)
        np.testing.assert_allclose(adv, expected, atol=1e-10)
        np.testing.assert_allclose(ret, expected + values, atol=1e-10)


def test_gae_monte_carlo_limit():
    # lambda=1, gamma=1, no dones: A = sum(rewards to end) + V_last - V_t.
    rng = np.random.default_rng(9)
    T, n = 16, 8
    rewards = rng.standard_normal((T, n))
    values = rng.standard_normal((T, n))
    dones = np.zeros((T, n))
    last = rng.standard_normal(n)
    adv, _ = compute_gae(rewards, values, dones, last, 1.0, 1.0)
    mc = np.cumsum(rewards[::-1], axis=0)[::-1] + last[None] - values
    np.testing.assert_allclose(adv, mc, atol=1e-9)


# ---------------------------------------------------------- gradient checks


def flatten_params(dicts):
    return np.concatenate([d[k].ravel() for d in dicts for k in sorted(d)])


def set_params(dicts, flat):
    i = 0
    for d in dicts:
        for k in sorted(d):
            n = d[k].size
            d[k][...] = flat[i:i + n].reshape(d[k].shape)
            i += n


def make_small_problem(seed=0, batch=4, obs_dim=5, act_dim=3):
    rng = np.random.default_rng(seed)
    policy = Policy.create(obs_dim, act_dim, [8, 8], seed=seed)
    value = value_net(obs_dim, [8, 8], seed=seed + 1)
    obs = rng.standard_normal((batch, obs_dim))
    actions = policy.mean(obs) + 0.3 * rng.standard_normal((batch, act_dim))
    lp_old = policy.log_prob(obs, actions) + 0.05 * rng.standard_normal(batch)
    adv = rng.standard_normal(batch)
    ret = rng.standard_normal(batch)
    cfg = {"clip_eps": 0.2, "value_coef": 0.5, "entropy_coef": 0.01}
    return policy, value, obs, actions, lp_old, adv, ret, cfg


def test_ppo_gradients_match_finite_differences():
    policy, value, obs, actions, lp_old, adv, ret, cfg = make_small_problem()
    dicts = [policy.net.params, {"log_std": policy.log_std}, value.params]

    def loss_at(flat):
        set_params(dicts, flat)
        loss, _, _, _ = ppo_loss_and_grads(policy, value, obs, actions, lp_old, adv, ret, cfg)
        return loss

    x0 = flatten_params(dicts).copy()
    _, pg, vg, _ = ppo_loss_and_grads(policy, value, obs, actions, lp_old, adv, ret, cfg)
    log_std_g = pg.pop("log_std")
    analytic = flatten_params([pg, {"log_std": log_std_g}, vg])

    h = 1e-5
    num = np.zeros_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        num[i] = (loss_at(xp) - loss_at(xm)) / (2 * h)
    set_params(dicts, x0)

    denom = max(np.linalg.norm(num), 1e-12)
    rel = np.linalg.norm(analytic - num) / denom
    assert rel < 1e-3, f"relative grad error {rel}"


def test_ratio_one_matches_unclipped_policy_gradient():
    # With lp_old exactly equal to current lp, ratios are 1: the clipped
    # surrogate gradient equals the plain policy-gradient estimator.
    policy, value, obs, actions, _, adv, ret, cfg = make_small_problem(seed=3)
    lp_old = policy.log_prob(obs, actions)
    _, pg, _, metrics = ppo_loss_and_grads(policy, value, obs, actions, lp_old, adv, ret, cfg)
    assert metrics["clip_frac"] == 0.0

    # Reference: grad of -mean(lp * adv) via finite differences.
    dicts = [policy.net.params, {"log_std": policy.log_std}]
    x0 = flatten_params(dicts).copy()

    def pg_loss(flat):
        set_params(dicts, flat)
        lp = policy.log_prob(obs, actions)
        return -np.mean(lp * adv) - cfg["entropy_coef"] * policy.entropy()

    h = 1e-6
    num = np.zeros_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        num[i] = (pg_loss(xp) - pg_loss(xm)) / (2 * h)
    set_params(dicts, x0)
    log_std_g = pg.pop("log_std")
    analytic = flatten_params([pg, {"log_std": log_std_g}])
    assert np.max(np.abs(analytic - num)) < 1e-8


def test_zero_advantages_only_entropy_moves_policy():
    policy, value, obs, actions, lp_old, _, ret, cfg = make_small_problem(seed=4)
    adv = np.zeros(obs.shape[0])
    cfg = dict(cfg, entropy_coef=0.0)
    _, pg, _, _ = ppo_loss_and_grads(policy, value, obs, actions, lp_old, adv, ret, cfg)
    for k, g in pg.items():
        assert np.max(np.abs(g)) < 1e-12, f"unexpected gradient on {k}"


def test_nonfinite_loss_aborts():
    from psmsim.rl import TrainingFault

    policy, value, obs, actions, lp_old, adv, ret, cfg = make_small_problem(seed=5)
    with pytest.raises(TrainingFault):
        ppo_loss_and_grads(policy, value, obs, actions, lp_old, adv, ret + np.inf, cfg)


# ------------------------------------------------------------- update plumbing


def test_advantage_normalization_and_clipfrac_first_epoch():
    cfg = config_mod.defaults()["rl"]
    env = create_batch(TaskSpec(TASK_REACH), SPACE_CARTESIAN, 8, seed=0)
    policy = Policy.create(env.obs_dim, env.action_dim, [16, 16], seed=1)
    value = value_net(env.obs_dim, [16, 16], seed=2)
    norm = RunningNormalizer(env.obs_dim)
    rng = np.random.Generator(np.random.PCG64(3))
    buf, last, _, _ = collect_rollout(env, policy, value, norm, 8, rng, env.observe())

    adv, _ = compute_gae(buf.rewards, buf.values, buf.dones, last, cfg["gamma"], cfg["gae_lambda"])
    a = adv.ravel()
    a = (a - a.mean()) / (a.std() + 1e-8)
    assert abs(a.mean()) < 1e-6 and abs(a.std() - 1.0) < 1e-6

    # Fresh policy, 1 epoch, 1 minibatch: ratios are exactly 1 -> clip_frac 0.
    one = dict(cfg, epochs_per_update=1, minibatches=1)
    metrics = ppo_update(policy, value, buf, last, one, Adam(1e-4), Adam(1e-4), rng)
    assert metrics["clip_frac"] == 0.0
    assert 0.0 <= metrics["clip_frac"] <= 1.0


def test_normalizer_running_stats():
    rng = np.random.default_rng(0)
    norm = RunningNormalizer(4)
    data = rng.normal(3.0, 2.0, size=(1000, 4))
    for chunk in np.split(data, 10):
        norm.update(chunk)
    np.testing.assert_allclose(norm.mean, data.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(norm.var, data.var(axis=0), atol=1e-9)


def test_checkpoint_roundtrip(tmp_path):
    policy = Policy.create(6, 3, [16, 16], seed=0)
    value = value_net(6, [16, 16], seed=1)
    norm = RunningNormalizer(6)
    norm.update(np.random.default_rng(2).standard_normal((100, 6)))
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, policy, value, norm, meta={"task": "reach"})
    p2, v2, n2, meta = load_checkpoint(path)
    assert meta["task"] == "reach"
    for k in policy.net.params:
        assert np.array_equal(policy.net.params[k], p2.net.params[k])
    assert np.array_equal(policy.log_std, p2.log_std)
    for k in value.params:
        assert np.array_equal(value.params[k], v2.params[k])
    assert np.array_equal(norm.mean, n2.mean) and norm.count == n2.count


def test_training_step_deterministic():
    from psmsim.rl import train

    cfg = config_mod.defaults()
    cfg["rl"]["eval_interval_updates"] = 2
    r1 = train(TaskSpec(TASK_REACH), cfg, n_envs=16, seed=5, wall_clock_budget_s=1e9,
               max_updates=4, eval_trials=10)
    r2 = train(TaskSpec(TASK_REACH), cfg, n_envs=16, seed=5, wall_clock_budget_s=1e9,
               max_updates=4, eval_trials=10)
    assert [(c["env_steps"], c["success_rate"]) for c in r1.curve] == \
           [(c["env_steps"], c["success_rate"]) for c in r2.curve]
    for k in r1.policy.net.params:
        assert np.array_equal(r1.policy.net.params[k], r2.policy.net.params[k])
