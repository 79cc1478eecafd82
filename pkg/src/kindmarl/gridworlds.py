"""Desk-scale Cleanup and Harvest gridworlds and a one-shot matrix game.

Cleanup and Harvest share the grid machinery: absolute moves (up, down, left,
right), stay, and a straight punishment beam along the facing direction.
Agents move one at a time in AgentId order, so when two agents go for the same
cell the lower id gets there first. Every step records an event log
(``apples``, ``beams``, ``hits``, ``spawned``) which the reward bookkeeping can
be cross-checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .envcore import JointAction, MarkovGame, Observation

UP, DOWN, LEFT, RIGHT, STAY = 0, 1, 2, 3, 4
_DIRS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])

APPLE_REWARD = 1.0
BEAM_COST = -1.0
HIT_PENALTY = -50.0


def _check_window(window: int) -> None:
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")


class _GridGame(MarkovGame):
    """Shared movement, beam and observation logic.

    Terrain lives in ``self.cells`` as small integer codes; subclasses map
    terrain codes to observation channels. Agent codes are appended after the
    terrain codes: four "self facing X" codes, then one "other agent" code.
    """

    n_terrain: int  # number of terrain codes, including OUTSIDE = 0
    punish_action: int
    beam_length = 3

    def __init__(self, width: int, height: int, n_agents: int, window: int, horizon: int):
        super().__init__()
        _check_window(window)
        if n_agents < 2:
            raise ValueError("need at least two agents")
        if horizon < 1:
            raise ValueError("horizon must be positive")
        self.width, self.height = int(width), int(height)
        self.n_agents = int(n_agents)
        self.window = int(window)
        self.horizon = int(horizon)
        self.noop_action = STAY
        self.n_channels = self.n_terrain + 5
        self._onehot = np.eye(self.n_channels)
        self.pos = np.zeros((self.n_agents, 2), dtype=np.int64)
        self.facing = np.zeros(self.n_agents, dtype=np.int64)
        self.cells = np.zeros((self.height, self.width), dtype=np.int64)

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.window, self.window, self.n_channels)

    def _in_bounds(self, r: int, c: int) -> bool:
        return 0 <= r < self.height and 0 <= c < self.width

    def _place_agents(self, allowed: np.ndarray) -> None:
        """Place agents on distinct random cells where ``allowed`` is True."""
        flat = np.flatnonzero(allowed.reshape(-1))
        picks = self.rng.choice(flat, size=self.n_agents, replace=False)
        self.pos[:] = np.stack([picks // self.width, picks % self.width], axis=1)
        self.facing[:] = self.rng.integers(0, 4, size=self.n_agents)

    def _move_agents(self, joint: JointAction, rewards: np.ndarray, events: dict) -> None:
        occupied = {tuple(p) for p in self.pos}
        for k, a in enumerate(joint):
            if a > RIGHT:
                continue
            self.facing[k] = a
            r, c = self.pos[k] + _DIRS[a]
            if not self._in_bounds(r, c) or (r, c) in occupied:
                continue
            occupied.discard(tuple(self.pos[k]))
            occupied.add((r, c))
            self.pos[k] = (r, c)
            if self._consume(r, c):
                rewards[k] += APPLE_REWARD
                events["apples"].append(k)

    def _consume(self, r: int, c: int) -> bool:
        raise NotImplementedError

    def _ray(self, k: int) -> list[tuple[int, int]]:
        cells = []
        d = _DIRS[self.facing[k]]
        for step in range(1, self.beam_length + 1):
            r, c = self.pos[k] + step * d
            if not self._in_bounds(r, c):
                break
            cells.append((int(r), int(c)))
        return cells

    def _fire_punish(self, joint: JointAction, rewards: np.ndarray, events: dict) -> None:
        for k, a in enumerate(joint):
            if a != self.punish_action:
                continue
            rewards[k] += BEAM_COST
            events["beams"].append(k)
            ray = set(self._ray(k))
            for j in range(self.n_agents):
                if j != k and tuple(self.pos[j]) in ray:
                    rewards[j] += HIT_PENALTY
                    events["hits"].append((k, j))

    def _observe(self, k: int, prev_joint: JointAction) -> Observation:
        rad = self.window // 2
        codes = self.cells.copy()
        other = self.n_terrain + 4
        codes[self.pos[:, 0], self.pos[:, 1]] = other
        codes[self.pos[k, 0], self.pos[k, 1]] = self.n_terrain + self.facing[k]
        padded = np.pad(codes, rad, constant_values=0)
        r, c = self.pos[k]
        view = padded[r : r + self.window, c : c + self.window]
        return Observation(self._onehot[view], tuple(prev_joint), self.t)


# ---------------------------------------------------------------------------
# Cleanup

@dataclass
class CleanupConfig:
    width: int = 18
    height: int = 9
    river_rows: int = 2
    orchard_rows: int = 3
    waste_spawn_prob: float = 0.005
    apple_spawn_prob_max: float = 0.05
    waste_threshold: float = 0.4
    initial_waste: float = 0.2
    n_agents: int = 5
    window: int = 7
    horizon: int = 500

    def validate(self) -> None:
        if self.river_rows < 1 or self.orchard_rows < 1:
            raise ValueError("river_rows and orchard_rows must be >= 1")
        if self.river_rows + self.orchard_rows >= self.height:
            raise ValueError("river and orchard leave no walkable corridor")
        for name in ("waste_spawn_prob", "apple_spawn_prob_max", "waste_threshold", "initial_waste"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def cleanup_apple_spawn_prob(waste_fraction: float, p_max: float, threshold: float) -> float:
    """Per-cell apple spawn probability: linear decay to 0 at the threshold."""
    if threshold <= 0.0 or waste_fraction >= threshold:
        return 0.0
    return p_max * (1.0 - waste_fraction / threshold)


class Cleanup(_GridGame):
    """River on top, orchard at the bottom, corridor between.

    Actions: up, down, left, right, stay, clean beam, punish beam.
    """

    OUTSIDE, EMPTY, RIVER, WASTE, APPLE = range(5)
    n_terrain = 5
    CLEAN, PUNISH = 5, 6
    punish_action = PUNISH
    n_actions = 7

    def __init__(self, config: CleanupConfig | None = None):
        self.config = config or CleanupConfig()
        self.config.validate()
        cfg = self.config
        super().__init__(cfg.width, cfg.height, cfg.n_agents, cfg.window, cfg.horizon)
        self.river = np.zeros((self.height, self.width), dtype=bool)
        self.river[: cfg.river_rows] = True
        self.orchard = np.zeros_like(self.river)
        self.orchard[self.height - cfg.orchard_rows :] = True
        self.spawn_log: list[list[tuple[int, int]]] = []

    def waste_fraction(self) -> float:
        return float(np.mean(self.cells[self.river] == self.WASTE))

    def apple_spawn_prob(self) -> float:
        cfg = self.config
        return cleanup_apple_spawn_prob(self.waste_fraction(), cfg.apple_spawn_prob_max, cfg.waste_threshold)

    def _reset_state(self) -> None:
        self.cells[:] = self.EMPTY
        self.cells[self.river] = self.RIVER
        river_idx = np.flatnonzero(self.river.reshape(-1))
        n_waste = int(round(self.config.initial_waste * river_idx.size))
        waste = self.rng.choice(river_idx, size=n_waste, replace=False)
        self.cells.reshape(-1)[waste] = self.WASTE
        self._place_agents(~self.river & ~self.orchard)
        self.spawn_log = []

    def _consume(self, r: int, c: int) -> bool:
        if self.cells[r, c] == self.APPLE:
            self.cells[r, c] = self.EMPTY
            return True
        return False

    def _advance(self, joint: JointAction) -> tuple[np.ndarray, dict[str, Any]]:
        rewards = np.zeros(self.n_agents)
        events: dict[str, Any] = {"apples": [], "beams": [], "hits": [], "cleaned": 0, "spawned": []}
        self._move_agents(joint, rewards, events)
        for k, a in enumerate(joint):
            if a == self.CLEAN:
                for r, c in self._ray(k):
                    if self.cells[r, c] == self.WASTE:
                        self.cells[r, c] = self.RIVER
                        events["cleaned"] += 1
        self._fire_punish(joint, rewards, events)

        p_apple = self.apple_spawn_prob()
        events["apple_spawn_prob"] = p_apple
        occupied = np.zeros_like(self.river)
        occupied[self.pos[:, 0], self.pos[:, 1]] = True
        draws = self.rng.random(self.cells.shape)
        new_apples = self.orchard & ~occupied & (self.cells == self.EMPTY) & (draws < p_apple)
        self.cells[new_apples] = self.APPLE
        spawned = [(int(r), int(c)) for r, c in zip(*np.nonzero(new_apples))]
        events["spawned"] = spawned
        self.spawn_log.append(spawned)

        waste_draws = self.rng.random(self.cells.shape)
        new_waste = (self.cells == self.RIVER) & (waste_draws < self.config.waste_spawn_prob)
        self.cells[new_waste] = self.WASTE
        return rewards, events


# ---------------------------------------------------------------------------
# Harvest

DEFAULT_HARVEST_MAP = (
    "................",
    "..AAA......AAA..",
    ".AAAAA....AAAAA.",
    "..AAA......AAA..",
    "................",
    "......AAAA......",
    ".....AAAAAA.....",
    "......AAAA......",
    "................",
)


def _default_regrowth() -> list[float]:
    return [0.0, 0.005, 0.02, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05]


@dataclass
class HarvestConfig:
    n_agents: int = 4
    window: int = 7
    horizon: int = 500
    # index = number of apples among the 8 neighbouring cells
    regrowth_prob: list[float] = field(default_factory=_default_regrowth)
    map: tuple[str, ...] = DEFAULT_HARVEST_MAP

    @property
    def width(self) -> int:
        return len(self.map[0])

    @property
    def height(self) -> int:
        return len(self.map)

    def validate(self) -> None:
        if len(self.regrowth_prob) != 9:
            raise ValueError("regrowth_prob needs one entry per neighbour count 0..8")
        if self.regrowth_prob[0] != 0.0:
            raise ValueError("regrowth_prob[0] must be 0: a fully depleted patch never regrows")
        if any(b < a for a, b in zip(self.regrowth_prob, self.regrowth_prob[1:])):
            raise ValueError("regrowth_prob must be non-decreasing in neighbour count")
        if any(not 0.0 <= p <= 1.0 for p in self.regrowth_prob):
            raise ValueError("regrowth probabilities must lie in [0, 1]")
        if len({len(row) for row in self.map}) != 1:
            raise ValueError("map rows differ in length")


def neighbor_counts(apples: np.ndarray) -> np.ndarray:
    """Number of True cells among the 8 neighbours of every cell."""
    padded = np.pad(apples.astype(np.int64), 1)
    h, w = apples.shape
    total = np.zeros((h, w), dtype=np.int64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr or dc:
                total += padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    return total


class Harvest(_GridGame):
    """Apple patches that regrow only next to surviving apples.

    Actions: up, down, left, right, stay, punish beam.
    """

    OUTSIDE, EMPTY, APPLE = range(3)
    n_terrain = 3
    PUNISH = 5
    punish_action = PUNISH
    n_actions = 6

    def __init__(self, config: HarvestConfig | None = None):
        self.config = config or HarvestConfig()
        self.config.validate()
        cfg = self.config
        super().__init__(cfg.width, cfg.height, cfg.n_agents, cfg.window, cfg.horizon)
        self.tree = np.array([[ch == "A" for ch in row] for row in cfg.map])
        self._regrowth = np.asarray(cfg.regrowth_prob, dtype=np.float64)
        self.spawn_log: list[list[tuple[int, int]]] = []

    def apple_count(self) -> int:
        return int(np.sum(self.cells == self.APPLE))

    def _reset_state(self) -> None:
        self.cells[:] = self.EMPTY
        self.cells[self.tree] = self.APPLE
        self._place_agents(~self.tree)
        self.spawn_log = []

    def _consume(self, r: int, c: int) -> bool:
        if self.cells[r, c] == self.APPLE:
            self.cells[r, c] = self.EMPTY
            return True
        return False

    def _advance(self, joint: JointAction) -> tuple[np.ndarray, dict[str, Any]]:
        rewards = np.zeros(self.n_agents)
        events: dict[str, Any] = {"apples": [], "beams": [], "hits": [], "spawned": []}
        self._move_agents(joint, rewards, events)
        self._fire_punish(joint, rewards, events)

        apples = self.cells == self.APPLE
        prob = self._regrowth[neighbor_counts(apples)]
        occupied = np.zeros_like(apples)
        occupied[self.pos[:, 0], self.pos[:, 1]] = True
        draws = self.rng.random(self.cells.shape)
        new_apples = self.tree & ~apples & ~occupied & (draws < prob)
        self.cells[new_apples] = self.APPLE
        spawned = [(int(r), int(c)) for r, c in zip(*np.nonzero(new_apples))]
        events["spawned"] = spawned
        self.spawn_log.append(spawned)
        return rewards, events


# ---------------------------------------------------------------------------
# Matrix game (oracle environment)

@dataclass
class MatrixGameSpec:
    """Two-player one-shot game with a tabulated successor state.

    ``payoffs[a1, a2]`` is (e1, e2); ``successors[a1, a2]`` is the feature
    vector of the state reached; ``start`` is the initial state's features.
    """

    payoffs: np.ndarray
    successors: np.ndarray
    start: np.ndarray

    def __post_init__(self) -> None:
        self.payoffs = np.asarray(self.payoffs, dtype=np.float64)
        self.successors = np.asarray(self.successors, dtype=np.float64)
        self.start = np.asarray(self.start, dtype=np.float64)
        m = self.payoffs.shape[0]
        if m < 2 or self.payoffs.shape != (m, m, 2):
            raise ValueError(f"payoffs must have shape (m, m, 2) with m >= 2, got {self.payoffs.shape}")
        if self.successors.ndim != 3 or self.successors.shape[:2] != (m, m):
            raise ValueError("successors must have shape (m, m, F)")
        if self.start.shape != (self.successors.shape[2],):
            raise ValueError("start features must have shape (F,)")

    n_agents = 2

    @property
    def n_actions(self) -> int:
        return self.payoffs.shape[0]

    @property
    def n_features(self) -> int:
        return self.successors.shape[2]

    @classmethod
    def random(cls, rng: np.random.Generator, m: int, n_features: int = 4) -> "MatrixGameSpec":
        return cls(
            payoffs=rng.normal(size=(m, m, 2)),
            successors=rng.normal(size=(m, m, n_features)),
            start=rng.normal(size=n_features),
        )

    @classmethod
    def prisoners_dilemma(cls) -> "MatrixGameSpec":
        # action 0 = cooperate, 1 = defect
        payoffs = np.array([[[3, 3], [0, 5]], [[5, 0], [1, 1]]], dtype=np.float64)
        successors = np.eye(4).reshape(2, 2, 4)
        return cls(payoffs, successors, np.zeros(4))


class MatrixGame(MarkovGame):
    """One-step environment whose observations are the tabulated features.

    Observation grids have shape (1, 1, F) and hold raw features rather than a
    one-hot code; both agents see the same global features.
    """

    n_agents = 2

    def __init__(self, spec: MatrixGameSpec):
        super().__init__()
        self.spec = spec
        self.n_actions = spec.n_actions
        self.horizon = 1
        self.noop_action = 0
        self.features = spec.start.copy()

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (1, 1, self.spec.n_features)

    def _reset_state(self) -> None:
        self.features = self.spec.start.copy()

    def _advance(self, joint: JointAction) -> tuple[np.ndarray, dict[str, Any]]:
        self.features = self.spec.successors[joint].copy()
        return self.spec.payoffs[joint].copy(), {}

    def _observe(self, k: int, prev_joint: JointAction) -> Observation:
        return Observation(self.features.reshape(self.obs_shape).copy(), tuple(prev_joint), self.t)


def matrix_game_oracle_intentions(
    spec: MatrixGameSpec,
    joint_action: Sequence[int],
    impact_reference: str = "previous",
    eq4_literal: bool = False,
) -> np.ndarray:
    """Exact intention matrix by enumerating each fellow's actions.

    The "forward model" is the successor table itself and the encoder is the
    identity, so every counterfactual loss is a table lookup.
    """
    joint = tuple(int(a) for a in joint_action)
    m = spec.n_actions
    d = np.ones((2, 2))
    for k in range(2):
        for j in range(2):
            if j == k:
                continue
            if impact_reference == "previous":
                ref = spec.start
            elif impact_reference == "current":
                ref = spec.successors[joint]
            else:
                raise ValueError(f"unknown impact_reference {impact_reference!r}")
            losses = []
            for b in range(m):
                alt = list(joint)
                alt[j] = b
                diff = ref - spec.successors[tuple(alt)]
                losses.append(0.5 * float(np.dot(diff, diff)))
            actual = losses[joint[j]]
            others = [x for b, x in enumerate(losses) if b != joint[j]]
            denom = max(others) if eq4_literal else max(actual, max(others))
            d[k, j] = 1.0 if denom == 0.0 else actual / denom
    return d


def make_env(name: str, n_agents: int, horizon: int, params: dict | None = None) -> MarkovGame:
    params = dict(params or {})
    if name == "cleanup":
        return Cleanup(CleanupConfig(n_agents=n_agents, horizon=horizon, **params))
    if name == "harvest":
        if "map" in params:
            params["map"] = tuple(params["map"])
        return Harvest(HarvestConfig(n_agents=n_agents, horizon=horizon, **params))
    if name == "matrix":
        if n_agents != 2:
            raise ValueError("the matrix game has exactly two agents")
        preset = params.pop("preset", "prisoners_dilemma")
        if params:
            spec = MatrixGameSpec(params["payoffs"], params["successors"], params["start"])
        elif preset == "prisoners_dilemma":
            spec = MatrixGameSpec.prisoners_dilemma()
        else:
            raise ValueError(f"unknown matrix preset {preset!r}")
        return MatrixGame(spec)
    raise ValueError(f"unknown environment {name!r}")


ENV_NAMES = ("cleanup", "harvest", "matrix")
