"""Policy and value networks with explicit backprop, Adam, and checkpoints.

The learning stack is self-contained (no ML framework): dense tanh layers in
float64, a Gaussian action head with state-independent log-std, and an Adam
optimizer. Keeping the gradients explicit is what makes the finite-difference
gradient checks in the test suite meaningful.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG2PI = np.log(2.0 * np.pi)


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0):
    # Orthogonal-ish init: scaled uniform keeps tanh activations healthy.
    bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
    W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return W, np.zeros(fan_out)


class Mlp:
    """Dense tanh network; forward returns a cache for backward."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, out_scale: float = 1.0):
        self.sizes = list(sizes)
        self.params: dict[str, np.ndarray] = {}
        for i in range(len(sizes) - 1):
            scale = out_scale if i == len(sizes) - 2 else 1.0
            W, b = _init_layer(rng, sizes[i], sizes[i + 1], scale)
            self.params[f"W{i}"] = W
            self.params[f"b{i}"] = b
        self.n_layers = len(sizes) - 1

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = np.tanh(z) if i < self.n_layers - 1 else z
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of sum(loss) given d loss/d output; acts from forward."""
        grads = {}
        g = grad_out
        for i in range(self.n_layers - 1, -1, -1):
            h_in = acts[i]
            grads[f"W{i}"] = h_in.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[f"W{i}"].T) * (1.0 - acts[i] ** 2)
        return grads


@dataclass
class Policy:
    """Gaussian policy: MLP mean plus state-independent log-std per dim."""

    net: Mlp
    log_std: np.ndarray

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, hidden: list[int],
               seed: int, log_std_init: float = -1.5) -> "Policy":
        rng = np.random.Generator(np.random.PCG64(seed))
        net = Mlp([obs_dim] + list(hidden) + [action_dim], rng, out_scale=0.01)
        return cls(net, np.full(action_dim, float(log_std_init)))

    @property
    def obs_dim(self) -> int:
        return self.net.sizes[0]

    @property
    def action_dim(self) -> int:
        return self.net.sizes[-1]

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.net(obs)

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        mu = self.net(obs)
        std = np.exp(self.log_std)
        eps = rng.standard_normal(mu.shape)
        action = mu + std * eps
        return action, self.log_prob_given_mean(mu, action)

    def log_prob_given_mean(self, mu: np.ndarray, action: np.ndarray) -> np.ndarray:
        std = np.exp(self.log_std)
        z = (action - mu) / std
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) - 0.5 * self.action_dim * LOG2PI

    def log_prob(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        return self.log_prob_given_mean(self.net(obs), action)

    def entropy(self) -> float:
        return float(np.sum(self.log_std) + 0.5 * self.action_dim * (1.0 + LOG2PI))

    def clamp_log_std(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)


def value_net(obs_dim: int, hidden: list[int], seed: int) -> Mlp:
    rng = np.random.Generator(np.random.PCG64(seed))
    return Mlp([obs_dim] + list(hidden) + [1], rng)


class RunningNormalizer:
    """Per-dimension running mean/std (parallel Welford merge)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0.0

    def update(self, batch: np.ndarray):
        batch = batch.reshape(-1, batch.shape[-1])
        b_count = batch.shape[0]
        if b_count == 0:
            return
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        if self.count == 0.0:
            self.mean, self.var, self.count = b_mean, b_var, float(b_count)
            return
        total = self.count + b_count
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (b_count / total)
        m_a = self.var * self.count
        m_b = b_var * b_count
        self.var = (m_a + m_b + delta * delta * (self.count * b_count / total)) / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / np.sqrt(self.var + 1e-8)

    def state(self) -> dict:
        return {"mean": self.mean, "var": self.var, "count": np.array([self.count])}

    @classmethod
    def from_state(cls, state: dict) -> "RunningNormalizer":
        n = cls(state["mean"].shape[0])
        n.mean = np.asarray(state["mean"], dtype=np.float64)
        n.var = np.asarray(state["var"], dtype=np.float64)
        n.count = float(state["count"][0])
        return n


class Adam:
    """Adaptive-moment optimizer over a dict of parameter arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def clip_grads_global(grad_dicts: list[dict[str, np.ndarray]], max_norm: float) -> float:
    """Scale all gradients by a shared factor so the global norm <= max_norm."""
    total = 0.0
    for grads in grad_dicts:
        for g in grads.values():
            total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for grads in grad_dicts:
            for k in grads:
                grads[k] = grads[k] * scale
    return norm


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(path: str | Path, policy: Policy, value: Mlp | None,
                    normalizer: RunningNormalizer | None, meta: dict | None = None):
    """Self-describing checkpoint (npz + json header), written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "policy_sizes": policy.net.sizes,
        "value_sizes": value.sizes if value is not None else None,
        "has_normalizer": normalizer is not None,
        "meta": meta or {},
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)}
    for k, v in policy.net.params.items():
        arrays[f"policy/{k}"] = v
    arrays["policy/log_std"] = policy.log_std
    if value is not None:
        for k, v in value.params.items():
            arrays[f"value/{k}"] = v
    if normalizer is not None:
        for k, v in normalizer.state().items():
            arrays[f"norm/{k}"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path):
    """Returns (policy, value or None, normalizer or None, meta)."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        rng = np.random.Generator(np.random.PCG64(0))
        policy = Policy(Mlp(header["policy_sizes"], rng), data["policy/log_std"].copy())
        for k in list(policy.net.params):
            policy.net.params[k] = data[f"policy/{k}"].copy()
        value = None
        if header["value_sizes"]:
            value = Mlp(header["value_sizes"], rng)
            for k in list(value.params):
                value.params[k] = data[f"value/{k}"].copy()
        norm = None
        if header["has_normalizer"]:
            norm = RunningNormalizer.from_state(
                {k: data[f"norm/{k}"] for k in ("mean", "var", "count")}
            )
        return policy, value, norm, header["meta"]
