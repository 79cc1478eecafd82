"""Reward shaping: smoothed reward traces, kindness-weighted inequity aversion,
and the linear extrinsic/intrinsic mixer."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .envcore import Transition

METHODS = ("baseline", "ia", "kindmarl")

# (envy_coeff, guilt_coeff)
PRESETS: dict[str, tuple[float, float]] = {
    "advantageous": (0.0, 0.05),
    "advantageous_swapped": (0.05, 0.0),
    "searched_ia": (0.6, -0.2),
    "searched_kindmarl": (0.0, -1.0),
}


@dataclass
class ShapingParams:
    """Coefficients for one run.

    ``envy_coeff`` / ``guilt_coeff`` are per-agent vectors (a scalar is
    broadcast by :meth:`coeffs`). ``method == "baseline"`` forces the
    intrinsic weight to zero.
    """

    envy_coeff: float | Sequence[float] = 0.0
    guilt_coeff: float | Sequence[float] = 0.05
    trace_decay: float = 0.95
    discount: float = 0.99
    extrinsic_weight: float = 1.0
    intrinsic_weight: float = 1.0
    method: str = "kindmarl"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.trace_decay <= 1.0:
            raise ValueError(f"trace_decay must lie in [0, 1], got {self.trace_decay}")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.discount}")
        if np.any(np.asarray(self.envy_coeff, dtype=np.float64) < 0):
            raise ValueError("envy_coeff must be non-negative")
        if self.method == "baseline" and self.intrinsic_weight != 0.0:
            warnings.warn("method=baseline: intrinsic_weight forced to 0", stacklevel=2)
            self.intrinsic_weight = 0.0

    def coeffs(self, n_agents: int) -> tuple[np.ndarray, np.ndarray]:
        envy = np.broadcast_to(np.asarray(self.envy_coeff, dtype=np.float64), (n_agents,))
        guilt = np.broadcast_to(np.asarray(self.guilt_coeff, dtype=np.float64), (n_agents,))
        return envy, guilt


@dataclass
class RewardTrace:
    w: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n_agents: int) -> "RewardTrace":
        return cls(np.zeros(n_agents), 0)


def trace_update(trace: RewardTrace, extrinsic: Sequence[float], discount: float, trace_decay: float) -> RewardTrace:
    """w_t = discount * trace_decay * w_{t-1} + e_t for every agent."""
    e = np.asarray(extrinsic, dtype=np.float64)
    if e.shape != trace.w.shape:
        raise ValueError("reward vector does not match trace size")
    return RewardTrace(discount * trace_decay * trace.w + e, trace.t + 1)


def intrinsic_reward(k: int, trace: RewardTrace, intentions: Sequence[float], envy: float, guilt: float) -> float:
    """Kindness-weighted inequity aversion for agent k.

    Each fellow's envy/guilt comparison is scaled by k's estimate of that
    fellow's intention. With all intentions 1 this is plain inequity aversion.
    """
    w = trace.w
    N = w.shape[0]
    if N < 2:
        raise ValueError("inequity aversion needs at least two agents")
    d = np.asarray(intentions, dtype=np.float64)
    mask = np.arange(N) != k
    ahead = np.maximum(w[mask] - w[k], 0.0)
    behind = np.maximum(w[k] - w[mask], 0.0)
    value = -envy / (N - 1) * np.dot(d[mask], ahead) - guilt / (N - 1) * np.dot(d[mask], behind)
    # + 0.0 maps -0.0 to 0.0 so zero coefficients print like the baseline
    return float(value) + 0.0


def mix_reward(extrinsic: float, intrinsic: float, params: ShapingParams) -> float:
    return params.extrinsic_weight * extrinsic + params.intrinsic_weight * intrinsic


@dataclass
class ShapedStep:
    extrinsic: np.ndarray
    intrinsic: np.ndarray
    mixed: np.ndarray
    intentions: np.ndarray  # (N, N)
    trace: RewardTrace = field(repr=False)


IntentionFn = Callable[[int, Transition], np.ndarray]


def shape_step(
    transition: Transition,
    trace: RewardTrace,
    params: ShapingParams,
    intention_fn: IntentionFn | None = None,
    step_index: int | None = None,
) -> ShapedStep:
    """trace update -> intentions -> intrinsic reward -> mix, for all agents.

    ``intention_fn(k, transition)`` supplies row k of the intention matrix when
    ``params.method == "kindmarl"``; ``None`` means unit intentions (the
    warm-up regime). Other methods always use unit intentions, and the
    baseline reports zero intrinsic reward.
    """
    if step_index is not None and step_index != trace.t:
        raise ValueError(f"trace is at step {trace.t} but transition is step {step_index}")
    N = transition.n_agents
    e = transition.extrinsic
    trace = trace_update(trace, e, params.discount, params.trace_decay)
    d = np.ones((N, N))
    if params.method == "kindmarl" and intention_fn is not None:
        for k in range(N):
            d[k] = intention_fn(k, transition)
    envy, guilt = params.coeffs(N)
    i = np.zeros(N)
    if params.method != "baseline":
        for k in range(N):
            i[k] = intrinsic_reward(k, trace, d[k], envy[k], guilt[k])
    r = np.array([mix_reward(e[k], i[k], params) for k in range(N)])
    return ShapedStep(e.copy(), i, r, d, trace)
