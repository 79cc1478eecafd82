"""DQN learner with uniform replay, a target network and epsilon-greedy acting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .approx import Mlp, Optimizer, flatten_grads, flatten_params


@dataclass
class DqnConfig:
    hidden: tuple[int, ...] = (32, 32)
    lr: float = 1e-3
    discount: float = 0.99
    buffer_capacity: int = 50_000
    batch_size: int = 64
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 20_000
    target_sync: int = 500
    learn_every: int = 4
    learn_start: int = 64

    def validate(self) -> None:
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if min(self.buffer_capacity, self.batch_size, self.target_sync, self.learn_every) < 1:
            raise ValueError("buffer_capacity, batch_size, target_sync and learn_every must be positive")
        if self.epsilon_decay_steps < 0 or self.learn_start < 0:
            raise ValueError("epsilon_decay_steps and learn_start must be non-negative")


def epsilon_at(cfg: DqnConfig, step: int) -> float:
    """Linear decay from epsilon_start to epsilon_end."""
    if cfg.epsilon_decay_steps == 0:
        return cfg.epsilon_end
    frac = min(1.0, step / cfg.epsilon_decay_steps)
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


class ReplayBuffer:
    def __init__(self, capacity: int, obs_size: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_size))
        self.next_obs = np.zeros((capacity, obs_size))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action: int, reward: float, next_obs, done: bool) -> None:
        if not np.isfinite(reward):
            raise ValueError("non-finite reward in replay entry")
        i = self._next
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = self.sample_indices(rng, batch_size)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx]


def _identity(x: np.ndarray) -> np.ndarray:
    return x


class DqnAgent:
    """Q-network over features produced by ``featurize`` (read-only).

    The replay stores raw flattened observations; features are recomputed at
    learning time so they follow the current encoder.
    """

    def __init__(
        self,
        obs_size: int,
        feature_size: int,
        n_actions: int,
        config: DqnConfig | None = None,
        rng: np.random.Generator | None = None,
        featurize: Callable[[np.ndarray], np.ndarray] | None = None,
    ):
        self.config = cfg = config or DqnConfig()
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        init_rng, self.act_rng, self.replay_rng = rng.spawn(3)
        self.n_actions = n_actions
        self.featurize = featurize or _identity
        self.online = Mlp([feature_size, *cfg.hidden, n_actions], init_rng)
        self.target = self.online.copy()
        self.flat_params = flatten_params([self.online])
        self.optimizer = Optimizer("adam", lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, obs_size)
        self.learn_calls = 0
        self.sync_events: list[int] = []

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        return self.online.predict(self.featurize(obs))

    def act(self, obs: np.ndarray, epsilon: float) -> int:
        # draw from the RNG unconditionally so the stream is independent of Q
        explore = self.act_rng.random() < epsilon
        random_action = int(self.act_rng.integers(self.n_actions))
        if explore:
            return random_action
        return int(np.argmax(self.q_values(obs)))  # first index wins ties

    def remember(self, obs, action: int, reward: float, next_obs, done: bool) -> None:
        self.buffer.add(obs, action, reward, next_obs, done)

    def td_targets(self, rewards: np.ndarray, next_obs: np.ndarray, dones: np.ndarray) -> np.ndarray:
        q_next = self.target.predict(self.featurize(next_obs))
        return rewards + self.config.discount * (1.0 - dones) * q_next.max(axis=1)

    def loss_and_grads(self, batch) -> tuple[float, list[np.ndarray]]:
        obs, actions, rewards, next_obs, dones = batch
        y = self.td_targets(rewards, next_obs, dones)
        q = self.online.forward(self.featurize(obs))
        rows = np.arange(q.shape[0])
        delta = q[rows, actions] - y
        loss = float(np.mean(delta * delta))
        g = np.zeros_like(q)
        g[rows, actions] = 2.0 * delta / q.shape[0]
        grads, _ = self.online.backward(g)
        return loss, grads

    def learn(self, batch) -> float:
        """One Adam step on the mean squared TD error; returns the pre-step loss."""
        if len(batch[1]) == 0:
            raise ValueError("empty DQN batch")
        loss, grads = self.loss_and_grads(batch)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite TD loss")
        self.optimizer.step([self.flat_params], [flatten_grads(grads)])
        self.learn_calls += 1
        if self.learn_calls % self.config.target_sync == 0:
            self.sync_target()
        return loss

    def learn_from_replay(self) -> float | None:
        cfg = self.config
        if len(self.buffer) < max(cfg.batch_size, cfg.learn_start):
            return None
        return self.learn(self.buffer.sample(self.replay_rng, cfg.batch_size))

    def sync_target(self) -> None:
        self.target.load_params(self.online.params)
        self.sync_events.append(self.learn_calls)
