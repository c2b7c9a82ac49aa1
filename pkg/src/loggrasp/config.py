"""Run configuration: one YAML file with a fixed schema, plus dotted-key overrides.

Sections map one-to-one onto the package's config dataclasses. Unknown keys
are rejected with their full path. ``dump`` writes every effective value, so
``load(dump(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from . import env as genv
from . import sim
from .errors import ConfigError
from .evaluation import STANDARD_DIAMETERS, SuccessCriteria
from .trainer import TrainConfig

# fields that are not user-tunable or are driven from elsewhere
SKIP = {
    "SimParams": {"model"},
    "TrainConfig": {"seed"},
}


@dataclass(frozen=True)
class EnvSection:
    action_repeat: int = 1


@dataclass(frozen=True)
class EvalSection:
    diameters: tuple = STANDARD_DIAMETERS
    trials: int = 100
    oracle: bool = False
    checkpoint: str | None = None
    record_trajectories: bool = False


@dataclass(frozen=True)
class PathsSection:
    log_dir: str = "runs/default"
    checkpoint_dir: str | None = None

    def resolved_checkpoint_dir(self) -> Path:
        return Path(self.checkpoint_dir) if self.checkpoint_dir else Path(self.log_dir) / "checkpoints"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scenario: sim.ScenarioConfig = field(default_factory=sim.ScenarioConfig)
    sim: sim.SimParams = field(default_factory=sim.SimParams)
    reward: genv.RewardConfig = field(default_factory=genv.RewardConfig)
    noise: genv.NoiseConfig = field(default_factory=genv.NoiseConfig)
    termination: genv.TerminationConfig = field(default_factory=genv.TerminationConfig)
    env: EnvSection = field(default_factory=EnvSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    criteria: SuccessCriteria = field(default_factory=SuccessCriteria)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def env_config(self) -> genv.EnvConfig:
        return genv.EnvConfig(self.scenario, self.sim, self.reward, self.noise, self.termination,
                              self.env.action_repeat)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)


def _fields(cls) -> list[dataclasses.Field]:
    skip = SKIP.get(cls.__name__, set())
    return [f for f in fields(cls) if f.name not in skip]


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _optional_inner(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0] if len(rest) == 1 else None
    return None


def coerce(value, tp, path: str):
    """Convert a parsed YAML value to the annotated field type, or raise ConfigError."""
    inner = _optional_inner(tp)
    if inner is not None:
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        return coerce(value, inner, path)
    try:
        if tp is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "yes", "1", "on", "false", "no", "0", "off"):
                return value.lower() in ("true", "yes", "1", "on")
            raise ValueError(value)
        if tp is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) else int(value)
        if tp is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if tp is str:
            return str(value)
        if tp is tuple:
            if isinstance(value, str):
                value = parse_sequence(value)
            elif isinstance(value, (int, float)) and not isinstance(value, bool):
                value = [value]
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            return tuple(float(v) if not float(v).is_integer() or isinstance(v, float) else int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: cannot interpret {value!r} as {getattr(tp, '__name__', tp)}") from exc
    raise ConfigError(f"{path}: unsupported field type {tp}")


def parse_sequence(text: str) -> list:
    """``"0.3..0.8"`` (steps of 0.1), ``"a..b:step"``, ``"1,2,3"`` or a YAML list."""
    text = text.strip()
    if ".." in text:
        span, _, step = text.partition(":")
        lo, hi = (float(v) for v in span.split(".."))
        step = float(step) if step else 0.1
        if step <= 0 or hi < lo:
            raise ValueError(text)
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    if text.startswith("["):
        return list(yaml.safe_load(text))
    return [yaml.safe_load(v) for v in text.split(",") if v.strip()]


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = _hints(cls)
    known = {f.name: f for f in _fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        key = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, key)
        else:
            kwargs[name] = coerce(value, tp, key)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.scenario.validate()
        if cfg.env.action_repeat < 1:
            raise ConfigError("env.action_repeat must be at least 1")
        if cfg.eval.trials < 0:
            raise ConfigError("eval.trials must be non-negative")
        if cfg.sim.dt <= 0 or cfg.sim.tau < 0:
            raise ConfigError("sim.dt must be positive and sim.tau non-negative")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def to_dict(obj) -> dict:
    out = {}
    for f in _fields(type(obj)):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def dump(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path


def flat_keys(cls=RunConfig, prefix: str = "") -> list[tuple[str, object, object]]:
    """Every leaf key as ``(dotted_name, type, default)``."""
    hints = _hints(cls)
    out = []
    default = cls()
    for f in _fields(cls):
        tp = hints[f.name]
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(tp):
            out.extend(flat_keys(tp, key + "."))
        else:
            out.append((key, tp, getattr(default, f.name)))
    return out


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """``overrides`` maps dotted keys to raw values (strings from the command line or parsed YAML)."""
    data = to_dict(cfg)
    for key, raw in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key}")
        if isinstance(raw, str):
            raw = raw if ".." in raw or "," in raw else yaml.safe_load(raw) if raw.strip() else raw
        node[parts[-1]] = raw
    return from_dict(data)
