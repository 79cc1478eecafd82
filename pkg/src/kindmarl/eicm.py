"""Per-agent curiosity module and the counterfactual intention estimate.

Each agent k owns an :class:`Eicm` with four parts:

* encoder: local grid -> q features
* forward model: (phi(s_{t-1}), u_{t-1}, one-hot a_{t-1}) -> predicted phi(s_t)
* inverse model: (phi(s_{t-1}), phi(s_t), u_{t-1}) -> logits for every agent's a_{t-1}
* MOA: FC stack + LSTM + head predicting the other agents' a_t; its hidden
  state is the context u fed to the forward and inverse models.

Intentions replace fellow j's action with every alternative b, run the forward
model on each variant and compare the impact losses (see :func:`intention`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .approx import (
    LstmCell,
    Mlp,
    Optimizer,
    block_cross_entropy,
    block_softmax,
    flatten_grads,
    flatten_params,
    half_squared_error,
)
from .envcore import Observation, Transition

IMPACT_REFERENCES = ("previous", "current")


@dataclass
class EicmConfig:
    q: int = 32
    encoder_hidden: tuple[int, ...] = (128, 128)
    forward_hidden: tuple[int, ...] = (32,)
    inverse_hidden: tuple[int, ...] = (32,)
    moa_hidden: tuple[int, ...] = (32, 32)
    moa_recurrent: int = 128
    forward_weight: float = 0.5
    inverse_weight: float = 0.4
    moa_weight: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    buffer_capacity: int = 10000
    warmup: int = 1000
    train_every: int = 1
    impact_reference: str = "previous"
    eq4_literal: bool = False
    use_context: bool = True

    def validate(self) -> None:
        if self.impact_reference not in IMPACT_REFERENCES:
            raise ValueError(f"impact_reference must be one of {IMPACT_REFERENCES}")
        if self.q < 1 or self.moa_recurrent < 1:
            raise ValueError("q and moa_recurrent must be positive")
        if min(self.forward_weight, self.inverse_weight, self.moa_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.train_every < 1 or self.warmup < 0:
            raise ValueError("batch_size, buffer_capacity, train_every must be positive and warmup >= 0")


@dataclass
class CounterfactualLossList:
    actual: float
    alternatives: np.ndarray

    def __post_init__(self) -> None:
        self.alternatives = np.asarray(self.alternatives, dtype=np.float64)
        if self.actual < 0 or np.any(self.alternatives < 0):
            raise ValueError("impact losses are non-negative")


def intention(losses: CounterfactualLossList, eq4_literal: bool = False) -> float:
    """Ratio of the actual action's impact to the largest available impact.

    By default the denominator includes the actual action itself, which keeps
    the result in [0, 1]; ``eq4_literal`` uses the alternatives only. A zero
    denominator means no action had measurable impact and yields 1.
    """
    top = float(np.max(losses.alternatives)) if losses.alternatives.size else 0.0
    denom = top if eq4_literal else max(losses.actual, top)
    if denom == 0.0:
        return 1.0
    return losses.actual / denom


def one_hot_joint(joints: np.ndarray, n_actions: int) -> np.ndarray:
    """(B, N) integer actions -> (B, N * n_actions) concatenated one-hots."""
    joints = np.atleast_2d(np.asarray(joints, dtype=np.int64))
    B, N = joints.shape
    out = np.zeros((B, N * n_actions))
    out[np.arange(B)[:, None], np.arange(N)[None, :] * n_actions + joints] = 1.0
    return out


class ImpactModel(Protocol):
    """What the counterfactual loop needs from a model."""

    n_actions: int
    impact_reference: str

    def encode(self, obs: Observation | np.ndarray) -> np.ndarray: ...

    def context(self) -> np.ndarray: ...

    def predict_next(self, phi_prev: np.ndarray, u: np.ndarray, joints: np.ndarray) -> np.ndarray: ...


def counterfactual_joints(joint: Sequence[int], j: int, n_actions: int) -> np.ndarray:
    """All m variants of ``joint`` with fellow j's slot set to 0..m-1."""
    rows = np.tile(np.asarray(joint, dtype=np.int64), (n_actions, 1))
    rows[:, j] = np.arange(n_actions)
    return rows


def _impact_losses(
    model: ImpactModel, transition: Transition, k: int, fellows: Sequence[int], u: np.ndarray | None
) -> np.ndarray:
    """Losses for every (fellow, action) pair, shape (len(fellows), m)."""
    m = model.n_actions
    phi_prev = model.encode(transition.obs[k])
    if model.impact_reference == "previous":
        ref = phi_prev
    else:
        ref = model.encode(transition.next_obs[k])
    u = model.context() if u is None else u
    joints = np.concatenate([counterfactual_joints(transition.joint_action, j, m) for j in fellows])
    preds = model.predict_next(phi_prev, u, joints)
    diff = preds - ref[None, :]
    return (0.5 * np.sum(diff * diff, axis=1)).reshape(len(fellows), m)


def counterfactual_losses(
    model: ImpactModel, transition: Transition, k: int, j: int, u: np.ndarray | None = None
) -> CounterfactualLossList:
    if j == k:
        raise ValueError("observer and fellow must differ")
    losses = _impact_losses(model, transition, k, [j], u)[0]
    a_j = transition.joint_action[j]
    return CounterfactualLossList(float(losses[a_j]), np.delete(losses, a_j))


def intentions_all(
    model: ImpactModel,
    transition: Transition,
    k: int,
    u: np.ndarray | None = None,
    eq4_literal: bool = False,
) -> np.ndarray:
    """Row k of the intention matrix; entry k is fixed at 1.

    All (N - 1) * m forward-model evaluations go through one batched call.
    """
    N = transition.n_agents
    fellows = [j for j in range(N) if j != k]
    losses = _impact_losses(model, transition, k, fellows, u)
    row = np.ones(N)
    for idx, j in enumerate(fellows):
        a_j = transition.joint_action[j]
        lst = CounterfactualLossList(float(losses[idx, a_j]), np.delete(losses[idx], a_j))
        row[j] = intention(lst, eq4_literal)
    return row


class ExactMatrixModel:
    """Identity encoder and the successor table as a perfect forward model."""

    def __init__(self, spec, impact_reference: str = "previous"):
        self.spec = spec
        self.n_actions = spec.n_actions
        self.impact_reference = impact_reference

    def encode(self, obs: Observation | np.ndarray) -> np.ndarray:
        grid = obs.grid if isinstance(obs, Observation) else obs
        return np.asarray(grid, dtype=np.float64).reshape(-1)

    def context(self) -> np.ndarray:
        return np.zeros(0)

    def predict_next(self, phi_prev: np.ndarray, u: np.ndarray, joints: np.ndarray) -> np.ndarray:
        joints = np.atleast_2d(joints)
        return self.spec.successors[joints[:, 0], joints[:, 1]]


@dataclass
class EicmBatch:
    obs_prev: np.ndarray  # (B, obs_size)
    obs: np.ndarray  # (B, obs_size)
    joint: np.ndarray  # (B, N) action that led obs_prev -> obs
    h: np.ndarray  # (B, H) MOA state before consuming this step
    c: np.ndarray
    next_joint: np.ndarray  # (B, N) the following joint action (MOA label)

    def __len__(self) -> int:
        return self.obs.shape[0]


class EicmReplay:
    """Ring buffer of EICM samples with uniform sampling."""

    def __init__(self, capacity: int, obs_size: int, n_agents: int, hidden: int):
        self.capacity = capacity
        self.obs_prev = np.zeros((capacity, obs_size))
        self.obs = np.zeros((capacity, obs_size))
        self.joint = np.zeros((capacity, n_agents), dtype=np.int64)
        self.next_joint = np.zeros((capacity, n_agents), dtype=np.int64)
        self.h = np.zeros((capacity, hidden))
        self.c = np.zeros((capacity, hidden))
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs_prev, obs, joint, h, c, next_joint) -> None:
        i = self._next
        self.obs_prev[i] = obs_prev
        self.obs[i] = obs
        self.joint[i] = joint
        self.h[i] = h
        self.c[i] = c
        self.next_joint[i] = next_joint
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int) -> EicmBatch:
        idx = rng.integers(0, self.size, size=batch_size)
        return EicmBatch(
            self.obs_prev[idx], self.obs[idx], self.joint[idx], self.h[idx], self.c[idx], self.next_joint[idx]
        )


@dataclass
class EicmLosses:
    forward: float
    inverse: float
    moa: float

    def weighted(self, cfg: EicmConfig) -> float:
        return cfg.forward_weight * self.forward + cfg.inverse_weight * self.inverse + cfg.moa_weight * self.moa


class Eicm:
    """Agent ``agent_id``'s curiosity module and MOA context."""

    def __init__(
        self,
        obs_size: int,
        n_agents: int,
        n_actions: int,
        agent_id: int,
        config: EicmConfig | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.config = cfg = config or EicmConfig()
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_size = obs_size
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.agent_id = agent_id
        self.impact_reference = cfg.impact_reference
        N, m, q, H = n_agents, n_actions, cfg.q, cfg.moa_recurrent
        self.encoder = Mlp([obs_size, *cfg.encoder_hidden, q], rng)
        self.forward_model = Mlp([q + H + N * m, *cfg.forward_hidden, q], rng)
        self.inverse_model = Mlp([2 * q + H, *cfg.inverse_hidden, N * m], rng)
        self.moa_fc = Mlp([q, *cfg.moa_hidden], rng, output_relu=True)
        self.moa_lstm = LstmCell(cfg.moa_hidden[-1] + N * m, H, rng)
        self.moa_head = Mlp([H, (N - 1) * m], rng)
        self.flat_params = flatten_params(list(self.nets().values()))
        self.optimizer = Optimizer("adam", lr=cfg.lr)
        self.others = [j for j in range(N) if j != agent_id]
        self.state = self.moa_lstm.zero_state()
        self._pending: tuple | None = None

    # -- parameters ---------------------------------------------------------

    def nets(self) -> dict[str, Mlp | LstmCell]:
        return {
            "encoder": self.encoder,
            "forward": self.forward_model,
            "inverse": self.inverse_model,
            "moa_fc": self.moa_fc,
            "moa_lstm": self.moa_lstm,
            "moa_head": self.moa_head,
        }

    @property
    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets().values() for p in net.params]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"{name}.{i}": p for name, net in self.nets().items() for i, p in enumerate(net.params)}

    def load_named_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, net in self.nets().items():
            for i, p in enumerate(net.params):
                p[...] = arrays[f"{name}.{i}"]

    # -- inference ----------------------------------------------------------

    def reset_context(self) -> None:
        self.state = self.moa_lstm.zero_state()
        self._pending = None

    def encode(self, obs: Observation | np.ndarray) -> np.ndarray:
        x = obs.flat() if isinstance(obs, Observation) else obs
        return self.encoder.predict(x)

    def context(self) -> np.ndarray:
        if not self.config.use_context:
            return np.zeros(self.config.moa_recurrent)
        return self.state[0]

    def _ctx_batch(self, h: np.ndarray) -> np.ndarray:
        return h if self.config.use_context else np.zeros_like(h)

    def predict_next(self, phi_prev: np.ndarray, u: np.ndarray, joints: np.ndarray) -> np.ndarray:
        """Forward-model prediction for each row of ``joints`` (B, N)."""
        acts = one_hot_joint(joints, self.n_actions)
        B = acts.shape[0]
        x = np.concatenate([np.tile(phi_prev, (B, 1)), np.tile(u, (B, 1)), acts], axis=1)
        return self.forward_model.predict(x)

    def forward_predict(self, phi_prev: np.ndarray, u: np.ndarray, joint: Sequence[int]) -> np.ndarray:
        return self.predict_next(phi_prev, u, np.asarray(joint)[None, :])[0]

    def moa_predict(self, phi_prev: np.ndarray, joint_prev: Sequence[int]) -> np.ndarray:
        """Advance the MOA state and return (N - 1, m) next-action probabilities."""
        z = self.moa_fc.predict(phi_prev)
        x = np.concatenate([z, one_hot_joint(joint_prev, self.n_actions)[0]])
        self.state = self.moa_lstm.step(x, self.state)
        logits = self.moa_head.predict(self.state[0])
        return block_softmax(logits, self.n_agents - 1).reshape(self.n_agents - 1, self.n_actions)

    def intentions(self, transition: Transition) -> np.ndarray:
        return intentions_all(self, transition, self.agent_id, self.context(), self.config.eq4_literal)

    def observe(self, transition: Transition, replay: EicmReplay | None = None) -> None:
        """Feed one environment step: store the labelled sample, advance u.

        A sample's MOA label is the *next* joint action, so each sample is held
        back one step and dropped if the episode ends first.
        """
        k = self.agent_id
        if self._pending is not None and replay is not None:
            replay.add(*self._pending, transition.joint_action)
        h, c = self.state
        obs_prev = transition.obs[k].flat()
        self._pending = (obs_prev, transition.next_obs[k].flat(), transition.joint_action, h, c)
        self.moa_predict(self.encoder.predict(obs_prev), transition.joint_action)
        if transition.done:
            self._pending = None

    # -- training -----------------------------------------------------------

    def loss_and_grads(
        self, batch: EicmBatch, weights: tuple[float, float, float] | None = None
    ) -> tuple[EicmLosses, list[np.ndarray]]:
        """Loss components and gradients of the weighted sum (order of ``params``).

        The forward and MOA losses see phi as a constant; only the inverse loss
        reaches the encoder. The stored MOA state is used as a constant.
        """
        cfg = self.config
        w_f, w_i, w_m = weights if weights is not None else (cfg.forward_weight, cfg.inverse_weight, cfg.moa_weight)
        B = len(batch)
        N, m = self.n_agents, self.n_actions
        acts = one_hot_joint(batch.joint, m)
        u = self._ctx_batch(batch.h)

        phi = self.encoder.forward(np.concatenate([batch.obs_prev, batch.obs]))
        phi_p, phi_c = phi[:B], phi[B:]

        f_in = np.concatenate([phi_p, u, acts], axis=1)
        pred = self.forward_model.forward(f_in)
        l_f, g_pred = half_squared_error(pred, phi_c)
        g_fwd, _ = self.forward_model.backward(w_f * g_pred)

        i_in = np.concatenate([phi_p, phi_c, u], axis=1)
        logits = self.inverse_model.forward(i_in)
        l_i, g_logits = block_cross_entropy(logits, batch.joint, N)
        g_inv, g_i_in = self.inverse_model.backward(w_i * g_logits)
        q = cfg.q
        g_phi = np.concatenate([g_i_in[:, :q], g_i_in[:, q : 2 * q]])
        g_enc, _ = self.encoder.backward(g_phi)

        z = self.moa_fc.forward(phi_p)
        xs = np.concatenate([z, acts], axis=1)[None]
        hs, _ = self.moa_lstm.forward(xs, batch.h, batch.c)
        moa_logits = self.moa_head.forward(hs[0])
        l_m, g_moa = block_cross_entropy(moa_logits, batch.next_joint[:, self.others], N - 1)
        g_head, g_h = self.moa_head.backward(w_m * g_moa)
        g_lstm, g_xs, _, _ = self.moa_lstm.backward(g_h[None])
        g_fc, _ = self.moa_fc.backward(g_xs[0][:, : z.shape[1]])

        grads = g_enc + g_fwd + g_inv + g_fc + g_lstm + g_head
        return EicmLosses(l_f, l_i, l_m), grads

    def train_step(self, batch: EicmBatch) -> EicmLosses:
        """One optimizer step on the weighted loss; returns pre-step losses."""
        if len(batch) == 0:
            raise ValueError("empty EICM batch")
        losses, grads = self.loss_and_grads(batch)
        cfg = self.config
        if cfg.forward_weight or cfg.inverse_weight or cfg.moa_weight:
            self.optimizer.step([self.flat_params], [flatten_grads(grads)])
        return losses

    def predict_actions(self, obs_prev: np.ndarray, obs: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Inverse-model argmax per agent, shape (B, N)."""
        phi_p = self.encoder.predict(obs_prev)
        phi_c = self.encoder.predict(obs)
        logits = self.inverse_model.predict(np.concatenate([phi_p, phi_c, self._ctx_batch(h)], axis=-1))
        return np.atleast_2d(logits).reshape(-1, self.n_agents, self.n_actions).argmax(axis=-1)


def train_eicm(eicm: Eicm, batch: EicmBatch) -> EicmLosses:
    return eicm.train_step(batch)
