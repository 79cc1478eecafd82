"""Experiment configuration: YAML file -> validated :class:`ExperimentConfig`.

Schema (version 1)::

    schema_version: 1
    name: cleanup-kindmarl          # run directory name (default "<env>-<method>")
    env: cleanup                    # or {name: cleanup, <env params>}
    n_agents: 2                     # default: 5 cleanup, 4 harvest, 2 matrix
    horizon: 500
    episodes: 200
    seeds: [0, 1, 2]
    method: kindmarl                # baseline | ia | kindmarl
    shaping:
      preset: advantageous          # optional, sets envy/guilt; explicit keys win
      envy_coeff: 0.0               # scalar or one value per agent
      guilt_coeff: 0.05
      trace_decay: 0.95
      discount: 0.99                # also the DQN discount
      extrinsic_weight: 1.0
      intrinsic_weight: 1.0
    eicm: {q, encoder_hidden, forward_hidden, inverse_hidden, moa_hidden,
           moa_recurrent, forward_weight, inverse_weight, moa_weight, lr,
           batch_size, buffer_capacity, warmup, train_every, impact_reference,
           eq4_literal, use_context}
    agent: {hidden, lr, buffer_capacity, batch_size, epsilon_start,
            epsilon_end, epsilon_decay_steps, target_sync, learn_every,
            learn_start}
    output_dir: runs
    per_step_csv: false
    workers: 1
    sweep:                          # optional list of shaping overrides
      - {envy_coeff: 0.6, guilt_coeff: -0.2}

Every error names the offending key path and, when known, its line.
"""

from __future__ import annotations

import copy
import dataclasses
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from ..agents import DqnConfig
from ..eicm import IMPACT_REFERENCES, EicmConfig
from ..gridworlds import ENV_NAMES, CleanupConfig, HarvestConfig
from ..social import METHODS, PRESETS, ShapingParams

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "KINDMARL_OUTPUT_ROOT"

DEFAULT_AGENTS = {"cleanup": 5, "harvest": 4, "matrix": 2}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str, line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path} (line {line})" if line is not None else path
        super().__init__(f"{where}: {message}")


# -- field checkers ----------------------------------------------------------

def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int(v):
    if not _is_int(v):
        raise TypeError("expected an integer")
    return v


def _pos_int(v):
    if not _is_int(v) or v < 1:
        raise TypeError("expected a positive integer")
    return v


def _nonneg_int(v):
    if not _is_int(v) or v < 0:
        raise TypeError("expected a non-negative integer")
    return v


def _float(v):
    if not _is_num(v):
        raise TypeError("expected a number")
    return float(v)


def _prob(v):
    v = _float(v)
    if not 0.0 <= v <= 1.0:
        raise ValueError("must lie in [0, 1]")
    return v


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError("expected true or false")
    return v


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _int_tuple(v):
    if not isinstance(v, list) or not v or not all(_is_int(x) and x > 0 for x in v):
        raise TypeError("expected a non-empty list of positive integers")
    return tuple(v)


def _float_list(v):
    if not isinstance(v, list) or not all(_is_num(x) for x in v):
        raise TypeError("expected a list of numbers")
    return [float(x) for x in v]


def _float_or_list(v):
    if _is_num(v):
        return float(v)
    return _float_list(v)


def _str_list(v):
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise TypeError("expected a list of strings")
    return list(v)


def _choice(options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(map(str, options))}")
        return v

    return check


Checker = Callable[[Any], Any]

CLEANUP_FIELDS: dict[str, Checker] = {
    "width": _pos_int,
    "height": _pos_int,
    "river_rows": _pos_int,
    "orchard_rows": _pos_int,
    "waste_spawn_prob": _prob,
    "apple_spawn_prob_max": _prob,
    "waste_threshold": _prob,
    "initial_waste": _prob,
    "window": _pos_int,
}
HARVEST_FIELDS: dict[str, Checker] = {
    "window": _pos_int,
    "regrowth_prob": _float_list,
    "map": _str_list,
}
MATRIX_FIELDS: dict[str, Checker] = {"preset": _choice(["prisoners_dilemma"])}
ENV_FIELDS = {"cleanup": CLEANUP_FIELDS, "harvest": HARVEST_FIELDS, "matrix": MATRIX_FIELDS}

SHAPING_FIELDS: dict[str, Checker] = {
    "preset": _choice(list(PRESETS)),
    "envy_coeff": _float_or_list,
    "guilt_coeff": _float_or_list,
    "trace_decay": _prob,
    "discount": _float,
    "extrinsic_weight": _float,
    "intrinsic_weight": _float,
}
EICM_FIELDS: dict[str, Checker] = {
    "q": _pos_int,
    "encoder_hidden": _int_tuple,
    "forward_hidden": _int_tuple,
    "inverse_hidden": _int_tuple,
    "moa_hidden": _int_tuple,
    "moa_recurrent": _pos_int,
    "forward_weight": _float,
    "inverse_weight": _float,
    "moa_weight": _float,
    "lr": _float,
    "batch_size": _pos_int,
    "buffer_capacity": _pos_int,
    "warmup": _nonneg_int,
    "train_every": _pos_int,
    "impact_reference": _choice(IMPACT_REFERENCES),
    "eq4_literal": _bool,
    "use_context": _bool,
}
AGENT_FIELDS: dict[str, Checker] = {
    "hidden": _int_tuple,
    "lr": _float,
    "buffer_capacity": _pos_int,
    "batch_size": _pos_int,
    "epsilon_start": _prob,
    "epsilon_end": _prob,
    "epsilon_decay_steps": _nonneg_int,
    "target_sync": _pos_int,
    "learn_every": _pos_int,
    "learn_start": _nonneg_int,
}
TOP_FIELDS = {
    "schema_version",
    "name",
    "env",
    "n_agents",
    "horizon",
    "episodes",
    "seeds",
    "method",
    "shaping",
    "eicm",
    "agent",
    "output_dir",
    "per_step_csv",
    "workers",
    "sweep",
    "csv_schema_version",  # written into resolved_config.yaml, informational only
}


@dataclass
class ExperimentConfig:
    name: str
    env: str
    env_params: dict[str, Any]
    n_agents: int
    horizon: int
    episodes: int
    seeds: list[int]
    method: str
    shaping: ShapingParams
    eicm: EicmConfig
    agent: DqnConfig
    output_dir: str = "runs"
    per_step_csv: bool = False
    workers: int = 1
    sweep: list[dict[str, Any]] = field(default_factory=list)
    source_text: str = ""

    @property
    def run_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV) or self.output_dir
        return Path(root) / self.name

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)

    def resolved(self) -> dict[str, Any]:
        """Plain-data view with every default filled in."""

        def plain(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, (list, tuple)):
                return [plain(x) for x in obj]
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            return obj

        out = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "env": {"name": self.env, **plain(self.env_params)},
            "n_agents": self.n_agents,
            "horizon": self.horizon,
            "episodes": self.episodes,
            "seeds": list(self.seeds),
            "method": self.method,
            "shaping": {k: v for k, v in plain(self.shaping).items() if k != "method"},
            "eicm": plain(self.eicm),
            "agent": {k: v for k, v in plain(self.agent).items() if k != "discount"},
            "output_dir": self.output_dir,
            "per_step_csv": self.per_step_csv,
            "workers": self.workers,
        }
        if self.sweep:
            out["sweep"] = plain(self.sweep)
        return out


# -- line lookup -----------------------------------------------------------------

def _line_index(text: str) -> dict[str, int]:
    """Map dotted key paths to 1-based line numbers."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    lines: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = f"{prefix}.{key.value}" if prefix else str(key.value)
                lines[path] = key.start_mark.line + 1
                walk(value, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                path = f"{prefix}[{i}]"
                lines[path] = item.start_mark.line + 1
                walk(item, path)

    if root is not None:
        walk(root, "")
    return lines


class _Validator:
    def __init__(self, text: str):
        self.lines = _line_index(text)

    def error(self, path: str, message: str) -> ConfigError:
        line = self.lines.get(path)
        parent = path
        while line is None and "." in parent:
            parent = parent.rsplit(".", 1)[0]
            line = self.lines.get(parent)
        return ConfigError(path, message, line)

    def section(self, data: Any, prefix: str, fields: dict[str, Checker]) -> dict[str, Any]:
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise self.error(prefix, "expected a mapping")
        out = {}
        for key, value in data.items():
            path = f"{prefix}.{key}"
            if key not in fields:
                raise self.error(path, "unknown key")
            try:
                out[key] = fields[key](value)
            except (TypeError, ValueError) as exc:
                raise self.error(path, str(exc)) from None
        return out


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(source, f"invalid YAML: {exc}", mark.line + 1 if mark else None) from None
    if not isinstance(data, dict):
        raise ConfigError(source, "top level must be a mapping")
    v = _Validator(text)
    for key in data:
        if key not in TOP_FIELDS:
            raise v.error(str(key), "unknown key")

    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise v.error("schema_version", f"unsupported schema version {version!r}, expected {SCHEMA_VERSION}")

    # environment
    env_raw = data.get("env")
    if env_raw is None:
        raise v.error("env", "required")
    if isinstance(env_raw, str):
        env_name, env_body = env_raw, {}
    elif isinstance(env_raw, dict):
        env_body = dict(env_raw)
        env_name = env_body.pop("name", None)
        if env_name is None:
            raise v.error("env.name", "required")
    else:
        raise v.error("env", "expected an environment name or a mapping")
    if env_name not in ENV_NAMES:
        raise v.error("env" if isinstance(env_raw, str) else "env.name", f"must be one of {', '.join(ENV_NAMES)}")
    env_params = v.section(env_body, "env", ENV_FIELDS[env_name])

    def top(key, checker, default):
        if key not in data:
            return default
        try:
            return checker(data[key])
        except (TypeError, ValueError) as exc:
            raise v.error(key, str(exc)) from None

    n_agents = top("n_agents", _int, DEFAULT_AGENTS[env_name])
    if n_agents < 2:
        raise v.error("n_agents", "need at least 2 agents")
    if env_name == "matrix" and n_agents != 2:
        raise v.error("n_agents", "the matrix game has exactly 2 agents")
    horizon = top("horizon", _pos_int, 500)
    if env_name == "matrix":
        horizon = 1
    episodes = top("episodes", _pos_int, 200)
    if "seeds" not in data:
        raise v.error("seeds", "required (a non-empty list of integers)")
    seeds = data["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(_is_int(s) for s in seeds):
        raise v.error("seeds", "expected a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise v.error("seeds", "duplicate seeds")
    if "method" not in data:
        raise v.error("method", "required")
    method = top("method", _choice(METHODS), None)

    shaping = v.section(data.get("shaping"), "shaping", SHAPING_FIELDS)
    preset = shaping.pop("preset", None)
    if preset is not None:
        envy, guilt = PRESETS[preset]
        shaping.setdefault("envy_coeff", envy)
        shaping.setdefault("guilt_coeff", guilt)
    for key in ("envy_coeff", "guilt_coeff"):
        if isinstance(shaping.get(key), list) and len(shaping[key]) != n_agents:
            raise v.error(f"shaping.{key}", f"needs one value per agent ({n_agents})")
    if "discount" in shaping and not 0.0 < shaping["discount"] <= 1.0:
        raise v.error("shaping.discount", "must lie in (0, 1]")
    if np.any(np.asarray(shaping.get("envy_coeff", 0.0)) < 0):
        raise v.error("shaping.envy_coeff", "must be non-negative")
    if method == "baseline":
        if shaping.get("intrinsic_weight", 0.0) != 0.0:
            warnings.warn("method=baseline: shaping.intrinsic_weight normalized to 0", stacklevel=2)
        shaping["intrinsic_weight"] = 0.0
    shaping_params = ShapingParams(method=method, **shaping)

    eicm_cfg = EicmConfig(**v.section(data.get("eicm"), "eicm", EICM_FIELDS))
    for key in ("forward_weight", "inverse_weight", "moa_weight", "lr"):
        if getattr(eicm_cfg, key) < 0:
            raise v.error(f"eicm.{key}", "must be non-negative")

    agent_cfg = DqnConfig(discount=shaping_params.discount, **v.section(data.get("agent"), "agent", AGENT_FIELDS))
    if agent_cfg.epsilon_end > agent_cfg.epsilon_start:
        raise v.error("agent.epsilon_end", "must not exceed agent.epsilon_start")

    try:
        if env_name == "cleanup":
            CleanupConfig(n_agents=n_agents, horizon=horizon, **env_params).validate()
        elif env_name == "harvest":
            p = dict(env_params)
            if "map" in p:
                p["map"] = tuple(p["map"])
            HarvestConfig(n_agents=n_agents, horizon=horizon, **p).validate()
    except ValueError as exc:
        raise v.error("env", str(exc)) from None

    sweep = data.get("sweep") or []
    if not isinstance(sweep, list):
        raise v.error("sweep", "expected a list of shaping overrides")
    sweep = [v.section(item, f"sweep[{i}]", SHAPING_FIELDS) for i, item in enumerate(sweep)]
    for i, item in enumerate(sweep):
        override = dict(item)
        preset = override.pop("preset", None)
        if preset is not None:
            override.setdefault("envy_coeff", PRESETS[preset][0])
            override.setdefault("guilt_coeff", PRESETS[preset][1])
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                dataclasses.replace(shaping_params, **override)
        except ValueError as exc:
            raise v.error(f"sweep[{i}]", str(exc)) from None

    name = top("name", _str, f"{env_name}-{method}")
    return ExperimentConfig(
        name=name,
        env=env_name,
        env_params=env_params,
        n_agents=n_agents,
        horizon=horizon,
        episodes=episodes,
        seeds=list(seeds),
        method=method,
        shaping=shaping_params,
        eicm=eicm_cfg,
        agent=agent_cfg,
        output_dir=top("output_dir", _str, "runs"),
        per_step_csv=top("per_step_csv", _bool, False),
        workers=top("workers", _pos_int, 1),
        sweep=sweep,
        source_text=text,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


def expand_sweep(config: ExperimentConfig) -> list[ExperimentConfig]:
    """One config per sweep entry (or the config itself when there is none)."""
    if not config.sweep:
        return [config]
    out = []
    for i, override in enumerate(config.sweep):
        override = dict(override)
        preset = override.pop("preset", None)
        if preset is not None:
            envy, guilt = PRESETS[preset]
            override.setdefault("envy_coeff", envy)
            override.setdefault("guilt_coeff", guilt)
        shaping = dataclasses.replace(config.shaping, **override)
        tag = "_".join(f"{k}={v}" for k, v in override.items()) or str(i)
        out.append(config.replace(name=f"{config.name}/{tag}", shaping=shaping, sweep=[]))
    return out
