"""Numpy DDPG with an optional safety layer on every emitted action."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import State
from .numcore import Adam, Mlp, backward_cached, forward_cached, mlp_forward, mlp_init
from .safety_layer import CorrectionResult, correct_action, correct_actions_batch
from .safety_model import ConstraintModel, predict_sensitivity, thresholds_of


@dataclass
class DdpgConfig:
    actor_hidden: tuple[int, ...] = (100, 100)
    critic_hidden: tuple[int, ...] = (500, 500)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    tau: float = 1e-3
    batch_size: int = 256
    replay_capacity: int = 100_000
    warmup: int = 1_000
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    gamma: float = 0.99
    # final layers drawn from U(-final_init, final_init) as in the original DDPG setup
    final_init: float = 3e-3
    # uniform random actions (still passed through any safety hook) until warmup is reached
    random_warmup: bool = True
    # differentiate through the safety layer in the actor update and critic target
    safety_in_graph: bool = False

    def __post_init__(self) -> None:
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        for name in ("actor_lr", "critic_lr", "tau", "ou_theta", "final_init"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.ou_sigma < 0:
            raise ValueError(f"ou_sigma must be non-negative, got {self.ou_sigma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ValueError("need 1 <= batch_size <= replay_capacity")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    signals: np.ndarray | None = None
    signals_next: np.ndarray | None = None


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling without replacement per batch."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int, num_signals: int = 0) -> None:
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.signals = np.zeros((capacity, num_signals))
        self.next_signals = np.zeros((capacity, num_signals))
        self.last_index: np.ndarray | None = None
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> None:
        i = self.cursor
        self.obs[i] = tr.s
        self.actions[i] = tr.a
        self.rewards[i] = tr.r
        self.next_obs[i] = tr.s_next
        self.dones[i] = float(tr.done)
        if self.signals.shape[1]:
            self.signals[i] = tr.signals
            self.next_signals[i] = tr.signals_next
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from a buffer holding {self.size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        self.last_index = idx
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx]


class OUNoise:
    """Discrete Ornstein-Uhlenbeck process ``x += theta * (mu - x) + sigma * N(0, I)``."""

    def __init__(self, size: int, rng: np.random.Generator, theta: float = 0.15, sigma: float = 0.2, mu: float = 0.0):
        self.size = size
        self.rng = rng
        self.theta = theta
        self.sigma = sigma
        self.mu = mu
        self.reset()

    def reset(self) -> None:
        self.state = np.full(self.size, self.mu)

    def sample(self) -> np.ndarray:
        self.state = self.state + self.theta * (self.mu - self.state) + self.sigma * self.rng.standard_normal(self.size)
        return self.state.copy()


def soft_update(target: Sequence[np.ndarray], source: Sequence[np.ndarray], tau: float) -> Sequence[np.ndarray]:
    """In place ``target <- tau * source + (1 - tau) * target``."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if len(target) != len(source):
        raise ValueError("parameter lists differ in length")
    for t, s in zip(target, source):
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {s.shape}")
        t *= 1.0 - tau
        t += tau * s
    return target


@dataclass
class SafetyHook:
    """Constraint models plus thresholds; corrects actions through the closed-form layer."""

    models: list[ConstraintModel]
    thresholds: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.thresholds is None:
            self.thresholds = thresholds_of(self.models)

    def __call__(self, state: State, action: np.ndarray) -> CorrectionResult:
        G = predict_sensitivity(self.models, state.obs)
        return correct_action(action, state.signals, self.thresholds, G)

    def batch(self, obs: np.ndarray, signals: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        G = predict_sensitivity(self.models, obs)
        return correct_actions_batch(actions, signals, self.thresholds, G)


class DdpgAgent:
    def __init__(self, obs_dim: int, action_dim: int, config: DdpgConfig, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.config = config
        self.rng = rng
        self.actor = mlp_init(
            [obs_dim, *config.actor_hidden, action_dim], "relu", rng, output_activation="tanh"
        )
        self.critic = mlp_init([obs_dim + action_dim, *config.critic_hidden, 1], "relu", rng)
        for net in (self.actor, self.critic):
            net.weights[-1][...] = rng.uniform(-config.final_init, config.final_init, net.weights[-1].shape)
            net.biases[-1][...] = rng.uniform(-config.final_init, config.final_init, net.biases[-1].shape)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(learning_rate=config.actor_lr)
        self.critic_opt = Adam(learning_rate=config.critic_lr)
        self.noise = OUNoise(action_dim, rng, config.ou_theta, config.ou_sigma)
        self.updates = 0

    def policy(self, obs: np.ndarray) -> np.ndarray:
        return mlp_forward(self.actor, obs)

    def act(
        self, state: State, explore: bool = False, safety: SafetyHook | None = None, uniform: bool = False
    ) -> tuple[np.ndarray, CorrectionResult | None]:
        """Actor output, plus OU noise when exploring, passed through ``safety`` if given.

        ``uniform`` replaces the actor output by a uniform draw from ``[-1, 1]``.
        """
        if uniform:
            mu = self.rng.uniform(-1.0, 1.0, self.action_dim)
        else:
            mu = self.policy(state.obs)
        if explore and not uniform:
            mu = np.clip(mu + self.noise.sample(), -1.0, 1.0)
        if safety is None:
            return mu, None
        corr = safety(state, mu)
        return corr.corrected_action, corr

    def q_values(self, obs: np.ndarray, actions: np.ndarray, target: bool = False) -> np.ndarray:
        net = self.critic_target if target else self.critic
        return mlp_forward(net, np.concatenate([obs, actions], axis=-1))[..., 0]

    def actor_gradient(
        self, obs: np.ndarray, signals: np.ndarray | None = None, safety: SafetyHook | None = None
    ) -> tuple[list[np.ndarray], float]:
        """Gradient of ``mean_b Q(s_b, pi(s_b))`` w.r.t. actor parameters, and that mean.

        ``pi`` is the actor, or the actor composed with the safety layer when
        ``safety`` and per-sample ``signals`` are supplied.
        """
        n = obs.shape[0]
        mu, a_cache = forward_cached(self.actor, obs)
        jac = None
        if safety is not None:
            mu, jac = safety.batch(obs, signals, mu)
        q, q_cache = forward_cached(self.critic, np.concatenate([obs, mu], axis=1))
        _, dx = backward_cached(self.critic, q_cache, np.full((n, 1), 1.0 / n))
        dq_da = dx[:, self.obs_dim :]
        if jac is not None:
            dq_da = np.einsum("bij,bi->bj", jac, dq_da)
        grads, _ = backward_cached(self.actor, a_cache, dq_da, need_input_grad=False)
        return grads, float(q.mean())

    def train_batch(
        self, buffer: ReplayBuffer, rng: np.random.Generator | None = None, safety: SafetyHook | None = None
    ) -> tuple[float, float]:
        """One critic and one actor Adam step on a sampled batch, then target soft updates."""
        cfg = self.config
        if len(buffer) < cfg.batch_size:
            raise ValueError(f"buffer holds {len(buffer)} transitions, need {cfg.batch_size}")
        s, a, r, s2, done = buffer.sample(cfg.batch_size, rng if rng is not None else self.rng)
        in_graph = safety is not None and cfg.safety_in_graph
        if in_graph and buffer.signals.shape[1] != len(safety.models):
            raise ValueError("buffer does not store the safety signals the layer needs")
        idx = buffer.last_index
        n = s.shape[0]
        if cfg.gamma > 0.0:
            a2 = mlp_forward(self.actor_target, s2)
            if in_graph:
                a2, _ = safety.batch(s2, buffer.next_signals[idx], a2)
            q2 = self.q_values(s2, a2, target=True)
            y = r + cfg.gamma * (1.0 - done) * q2
        else:
            y = r.copy()
        q, cache = forward_cached(self.critic, np.concatenate([s, a], axis=1))
        err = q[:, 0] - y
        critic_loss = float(np.mean(err**2))
        grads, _ = backward_cached(self.critic, cache, (2.0 / n) * err[:, None], need_input_grad=False)
        self.critic_opt.step(self.critic.params(), grads)

        if in_graph:
            actor_grads, objective = self.actor_gradient(s, buffer.signals[idx], safety)
        else:
            actor_grads, objective = self.actor_gradient(s)
        # ascend Q: descend on its negative
        self.actor_opt.step(self.actor.params(), [-g for g in actor_grads])

        soft_update(self.critic_target.params(), self.critic.params(), cfg.tau)
        soft_update(self.actor_target.params(), self.actor.params(), cfg.tau)
        self.updates += 1
        return critic_loss, objective

    def save(self, path: str | Path) -> None:
        payload = {
            "config": self.config.to_dict(),
            "actor": self.actor.to_dict(),
            "critic": self.critic.to_dict(),
            "actor_target": self.actor_target.to_dict(),
            "critic_target": self.critic_target.to_dict(),
            "actor_opt": self.actor_opt.to_dict(),
            "critic_opt": self.critic_opt.to_dict(),
            "updates": self.updates,
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path, rng: np.random.Generator) -> "DdpgAgent":
        payload = json.loads(Path(path).read_text())
        cfg = DdpgConfig(**payload["config"])
        actor = Mlp.from_dict(payload["actor"])
        agent = cls(actor.input_size, actor.output_size, cfg, rng)
        agent.actor = actor
        agent.critic = Mlp.from_dict(payload["critic"])
        agent.actor_target = Mlp.from_dict(payload["actor_target"])
        agent.critic_target = Mlp.from_dict(payload["critic_target"])
        agent.actor_opt = Adam.from_dict(payload["actor_opt"])
        agent.critic_opt = Adam.from_dict(payload["critic_opt"])
        agent.updates = payload["updates"]
        return agent
