"""Partially observed Markov-game contract shared by every environment."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

JointAction = tuple[int, ...]


class EpisodeDoneError(RuntimeError):
    """Raised when stepping an environment whose episode already ended."""


@dataclass(frozen=True)
class Observation:
    """One agent's local view.

    ``grid`` is a (window, window, channels) array; ``prev_joint_action`` is the
    joint action that produced this state (the no-op joint action at reset).
    """

    grid: np.ndarray
    prev_joint_action: JointAction
    step_index: int

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1)


@dataclass
class Transition:
    obs: list[Observation]
    joint_action: JointAction
    extrinsic: np.ndarray
    next_obs: list[Observation]
    done: bool
    events: dict[str, Any] = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.obs)


class MarkovGame(ABC):
    """Base class for N-agent environments with a shared discrete action set.

    Subclasses implement ``_reset_state`` / ``_advance`` / ``_observe``; the
    base class owns the RNG, the step counter and the done flag.
    """

    n_agents: int
    n_actions: int
    horizon: int
    noop_action: int = 0

    def __init__(self) -> None:
        self.rng = np.random.default_rng(0)
        self.t = 0
        self.done = True
        self._last_obs: list[Observation] | None = None

    @property
    @abstractmethod
    def obs_shape(self) -> tuple[int, int, int]: ...

    @property
    def obs_size(self) -> int:
        return int(np.prod(self.obs_shape))

    def reset(self, seed: int) -> list[Observation]:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self._reset_state()
        prev = (self.noop_action,) * self.n_agents
        self._last_obs = [self._observe(k, prev) for k in range(self.n_agents)]
        return self._last_obs

    def step(self, joint_action: Sequence[int]) -> Transition:
        if self.done or self._last_obs is None:
            raise EpisodeDoneError("step() called on a finished episode; call reset() first")
        joint = tuple(int(a) for a in joint_action)
        if len(joint) != self.n_agents:
            raise ValueError(f"joint action has {len(joint)} entries, expected {self.n_agents}")
        for a in joint:
            if not 0 <= a < self.n_actions:
                raise ValueError(f"action {a} outside [0, {self.n_actions})")
        rewards, events = self._advance(joint)
        self.t += 1
        self.done = self.t >= self.horizon
        next_obs = [self._observe(k, joint) for k in range(self.n_agents)]
        tr = Transition(
            obs=self._last_obs,
            joint_action=joint,
            extrinsic=np.asarray(rewards, dtype=np.float64),
            next_obs=next_obs,
            done=self.done,
            events=events,
        )
        self._last_obs = next_obs
        return tr

    @abstractmethod
    def _reset_state(self) -> None: ...

    @abstractmethod
    def _advance(self, joint: JointAction) -> tuple[np.ndarray, dict[str, Any]]: ...

    @abstractmethod
    def _observe(self, k: int, prev_joint: JointAction) -> Observation: ...
