"""Seeded training runs, CSV metrics and per-run summaries."""

from __future__ import annotations

import csv
import io
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

from ..agents import DqnAgent, epsilon_at
from ..approx import save_arrays
from ..eicm import Eicm, EicmReplay
from ..gridworlds import make_env
from ..social import RewardTrace, shape_step
from .config import ExperimentConfig, expand_sweep

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
TAIL_FRACTION = 0.2


def _pairs(n: int) -> list[tuple[int, int]]:
    return [(k, j) for k in range(n) for j in range(n) if j != k]


def episode_header(n: int) -> list[str]:
    cols = ["seed", "episode", "steps", "collective_extrinsic"]
    cols += [f"e_{k}" for k in range(n)] + [f"i_{k}" for k in range(n)] + [f"r_{k}" for k in range(n)]
    cols += [f"d_{k}_{j}" for k, j in _pairs(n)]
    cols += ["forward_loss", "inverse_loss", "moa_loss", "td_loss", "epsilon"]
    return cols


def step_header(n: int) -> list[str]:
    cols = ["seed", "episode", "step", "collective_extrinsic"]
    cols += [f"e_{k}" for k in range(n)] + [f"i_{k}" for k in range(n)] + [f"r_{k}" for k in range(n)]
    cols += [f"d_{k}_{j}" for k, j in _pairs(n)]
    cols += ["forward_loss", "inverse_loss", "moa_loss", "epsilon"]
    return cols


SUMMARY_HEADER = [
    "run",
    "method",
    "env",
    "n_agents",
    "seed",
    "status",
    "tail_mean_collective",
    "tail_std_collective",
    "n_tail_episodes",
    "convergence_episode",
    "error",
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1, dtype=np.uint64)[0])


def tail_count(episodes: int) -> int:
    return max(1, math.ceil(TAIL_FRACTION * episodes))


def convergence_episode(collective: np.ndarray, window: int = 10, band: float = 0.1) -> int | None:
    """First episode after which the moving average never drops below
    ``tail_mean - band * |tail_mean|``; None if that never holds."""
    n = len(collective)
    if n == 0:
        return None
    tail = float(np.mean(collective[-tail_count(n) :]))
    w = min(window, n)
    ma = np.convolve(collective, np.ones(w) / w, mode="valid")
    ok = ma >= tail - band * abs(tail)
    bad = np.flatnonzero(~ok)
    start = 0 if bad.size == 0 else int(bad[-1]) + 1
    if start >= ma.size:
        return None
    return start + w - 1


@dataclass
class SeedResult:
    seed: int
    status: str
    collective: list[float] = field(default_factory=list)
    error: str = ""

    @property
    def tail(self) -> np.ndarray:
        c = np.asarray(self.collective)
        return c[-tail_count(len(c)) :] if c.size else c


class _Learners:
    """Per-agent EICM + DQN set, built from one seed's RNG streams."""

    def __init__(self, config: ExperimentConfig, env, seed_seq: np.random.SeedSequence):
        N, m = env.n_agents, env.n_actions
        self.eicms: list[Eicm] = []
        self.dqns: list[DqnAgent] = []
        self.replays: list[EicmReplay] = []
        self.sample_rngs: list[np.random.Generator] = []
        for k, agent_seq in enumerate(seed_seq.spawn(N)):
            e_seq, d_seq, s_seq = agent_seq.spawn(3)
            eicm = Eicm(env.obs_size, N, m, k, config.eicm, np.random.default_rng(e_seq))
            self.eicms.append(eicm)
            self.dqns.append(
                DqnAgent(env.obs_size, config.eicm.q, m, config.agent, np.random.default_rng(d_seq), eicm.encode)
            )
            self.replays.append(
                EicmReplay(config.eicm.buffer_capacity, env.obs_size, N, config.eicm.moa_recurrent)
            )
            self.sample_rngs.append(np.random.default_rng(s_seq))

    def checkpoint(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (eicm, dqn) in enumerate(zip(self.eicms, self.dqns)):
            out.update({f"agent{k}.eicm.{name}": arr for name, arr in eicm.named_arrays().items()})
            out.update({f"agent{k}.dqn.online.{i}": p for i, p in enumerate(dqn.online.params)})
            out.update({f"agent{k}.dqn.target.{i}": p for i, p in enumerate(dqn.target.params)})
        return out


def run_seed(config: ExperimentConfig, seed: int, out_dir: Path | None = None) -> SeedResult:
    """Train one seed; write ``episodes.csv`` (and ``steps.csv``) under out_dir."""
    env = make_env(config.env, config.n_agents, config.horizon, config.env_params)
    N = env.n_agents
    root_seq = np.random.SeedSequence(seed)
    learners = _Learners(config, env, root_seq.spawn(1)[0])
    params = config.shaping
    warmup = config.eicm.warmup
    kind = params.method == "kindmarl"

    ep_buf = io.StringIO()
    ep_writer = csv.writer(ep_buf, lineterminator="\n")
    ep_writer.writerow(episode_header(N))
    step_buf = io.StringIO() if config.per_step_csv else None
    step_writer = csv.writer(step_buf, lineterminator="\n") if step_buf is not None else None
    if step_writer is not None:
        step_writer.writerow(step_header(N))

    result = SeedResult(seed=seed, status="ok")
    global_step = 0
    pairs = _pairs(N)
    for episode in range(config.episodes):
        obs = env.reset(episode_seed(seed, episode))
        trace = RewardTrace.zeros(N)
        for eicm in learners.eicms:
            eicm.reset_context()
        sums = np.zeros((3, N))
        d_sum = np.zeros((N, N))
        loss_sum, loss_n = np.zeros(3), 0
        td_sum, td_n = 0.0, 0
        steps = 0
        done = False
        while not done:
            eps = epsilon_at(config.agent, global_step)
            joint = [learners.dqns[k].act(obs[k].flat(), eps) for k in range(N)]
            tr = env.step(joint)
            intention_fn = None
            if kind and global_step >= warmup:
                intention_fn = lambda k, t: learners.eicms[k].intentions(t)  # noqa: E731
            shaped = shape_step(tr, trace, params, intention_fn, step_index=steps)
            trace = shaped.trace
            for k in range(N):
                learners.eicms[k].observe(tr, learners.replays[k])
                learners.dqns[k].remember(obs[k].flat(), joint[k], shaped.mixed[k], tr.next_obs[k].flat(), tr.done)
            global_step += 1
            steps += 1
            done = tr.done

            if global_step % config.agent.learn_every == 0:
                for dqn in learners.dqns:
                    td = dqn.learn_from_replay()
                    if td is not None:
                        td_sum += td
                        td_n += 1
            step_losses = None
            if global_step > warmup and global_step % config.eicm.train_every == 0:
                acc = np.zeros(3)
                trained = 0
                for k, eicm in enumerate(learners.eicms):
                    if len(learners.replays[k]) == 0:
                        continue
                    batch = learners.replays[k].sample(learners.sample_rngs[k], config.eicm.batch_size)
                    ls = eicm.train_step(batch)
                    acc += (ls.forward, ls.inverse, ls.moa)
                    trained += 1
                if trained:
                    step_losses = acc / trained
                    loss_sum += step_losses
                    loss_n += 1

            sums += (shaped.extrinsic, shaped.intrinsic, shaped.mixed)
            d_sum += shaped.intentions
            if step_writer is not None:
                row = [seed, episode, steps - 1, shaped.extrinsic.sum()]
                row += list(shaped.extrinsic) + list(shaped.intrinsic) + list(shaped.mixed)
                row += [shaped.intentions[k, j] for k, j in pairs]
                row += list(step_losses) if step_losses is not None else [None] * 3
                row.append(eps)
                step_writer.writerow([_fmt(x) for x in row])
            obs = tr.next_obs

        collective = float(sums[0].sum())
        result.collective.append(collective)
        d_mean = d_sum / steps
        losses = loss_sum / loss_n if loss_n else [None] * 3
        row = [seed, episode, steps, collective, *sums[0], *sums[1], *sums[2]]
        row += [d_mean[k, j] for k, j in pairs]
        row += [*losses, td_sum / td_n if td_n else None, epsilon_at(config.agent, global_step)]
        ep_writer.writerow([_fmt(x) for x in row])

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "episodes.csv").write_text(ep_buf.getvalue(), encoding="utf-8")
        if step_buf is not None:
            (out_dir / "steps.csv").write_text(step_buf.getvalue(), encoding="utf-8")
        save_arrays(out_dir / "checkpoint.kmck", learners.checkpoint())
    return result


def _run_seed_safe(config: ExperimentConfig, seed: int, out_dir: Path) -> SeedResult:
    try:
        return run_seed(config, seed, out_dir)
    except Exception as exc:  # a failing seed must not take the others down
        log.exception("seed %s failed", seed)
        return SeedResult(seed=seed, status="failed", error=f"{type(exc).__name__}: {exc}")


def random_policy_returns(config: ExperimentConfig, seed: int) -> list[float]:
    """Per-episode collective extrinsic reward of uniformly random agents."""
    env = make_env(config.env, config.n_agents, config.horizon, config.env_params)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    out = []
    for episode in range(config.episodes):
        env.reset(episode_seed(seed, episode))
        total = 0.0
        done = False
        while not done:
            tr = env.step(rng.integers(env.n_actions, size=env.n_agents))
            total += float(tr.extrinsic.sum())
            done = tr.done
        out.append(total)
    return out


def summary_rows(config: ExperimentConfig, results: Iterable[SeedResult]) -> list[list[str]]:
    rows = []
    tails = []
    for res in results:
        if res.status == "ok":
            tail = res.tail
            tails.append(float(tail.mean()))
            conv = convergence_episode(np.asarray(res.collective))
            vals = [tail.mean(), tail.std(), len(tail), conv, ""]
        else:
            vals = [None, None, None, None, res.error]
        rows.append([config.name, config.method, config.env, config.n_agents, res.seed, res.status, *vals])
    agg_std = float(np.std(tails, ddof=1)) if len(tails) > 1 else 0.0
    failed = any(r[5] != "ok" for r in rows)
    rows.append(
        [
            config.name,
            config.method,
            config.env,
            config.n_agents,
            "aggregate",
            "partial" if failed else "ok",
            float(np.mean(tails)) if tails else None,
            agg_std,
            len(tails),
            None,
            "",
        ]
    )
    return [[_fmt(x) if not isinstance(x, str) else x for x in row] for row in rows]


@dataclass
class RunResult:
    run_dir: Path
    seeds: list[SeedResult]

    @property
    def ok(self) -> bool:
        return all(s.status == "ok" for s in self.seeds)


def _run_single(config: ExperimentConfig, workers: int) -> RunResult:
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.source_text, encoding="utf-8")
    resolved = config.resolved()
    resolved["csv_schema_version"] = CSV_SCHEMA_VERSION
    (run_dir / "resolved_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=False), encoding="utf-8")
    seed_dirs = {s: run_dir / f"seed_{s}" for s in config.seeds}
    for d in seed_dirs.values():
        if d.exists():
            shutil.rmtree(d)
    if workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(config.seeds))) as pool:
            futures = [pool.submit(_run_seed_safe, config, s, seed_dirs[s]) for s in config.seeds]
            results = [f.result() for f in futures]
    else:
        results = [_run_seed_safe(config, s, seed_dirs[s]) for s in config.seeds]
    with open(run_dir / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(summary_rows(config, results))
    return RunResult(run_dir, results)


def run_experiment(
    config: ExperimentConfig, seed_offset: int = 0, workers: int | None = None
) -> list[RunResult]:
    """Run every seed (and every sweep entry) of ``config``."""
    workers = config.workers if workers is None else workers
    out = []
    for cfg in expand_sweep(config):
        if seed_offset:
            cfg = cfg.replace(seeds=[s + seed_offset for s in cfg.seeds])
        log.info("running %s (%s, %d seeds)", cfg.name, cfg.method, len(cfg.seeds))
        out.append(_run_single(cfg, workers))
    return out
