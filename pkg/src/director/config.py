"""Run configuration: nested dataclasses loaded from and saved to YAML.

Config files may set any subset of keys; unknown keys are rejected. The
defaults mirror the published hyperparameter table. Built-in presets
(``desk``, ``tiny``) shrink network widths and batch shapes for CPU runs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .diffcore import ConfigError, OptimizerConfig

GOAL_REWARDS = ("max_cosine", "inner", "inner_normed", "l2")
EXPLORE_PLACEMENTS = ("manager", "worker", "both", "none")
ABSTRACT_DISCOUNTS = ("power", "same")
MODES = ("sync", "async")


@dataclass
class ModelConfig:
    image_size: int = 64
    deter: int = 512
    stoch: int = 32
    min_std: float = 0.1
    mlp_layers: int = 4
    mlp_units: int = 512
    cnn_depth: int = 32
    kl_scale: float = 1.0


@dataclass
class GoalConfig:
    latents: int = 8
    classes: int = 8
    beta: float = 1.0
    samples: int = 1


@dataclass
class PolicyConfig:
    horizon: int = 16
    goal_duration: int = 8
    discount: float = 0.99
    return_lambda: float = 0.95
    manager_entropy: float = 1e-3
    worker_entropy: float = 1e-3
    extr_weight: float = 1.0
    expl_weight: float = 0.1
    worker_goal_weight: float = 1.0
    worker_task_weight: float = 0.0
    goal_reward: str = "max_cosine"
    explore: str = "manager"
    continuous_goals: bool = False
    abstract_discount: str = "power"
    norm_decay: float = 0.999
    norm_floor: float = 1e-8


@dataclass
class RunConfig:
    env: str = "pinpad:three"
    seed: int = 0
    steps: int = 1_000_000
    train_every: int = 16
    parallel_envs: int = 4
    mode: str = "sync"
    batch_size: int = 16
    batch_length: int = 64
    replay_capacity: int = 100_000
    eval_every: int = 50_000
    eval_episodes: int = 1
    checkpoint_every: int = 50_000
    logdir: str = "logdir"
    model: ModelConfig = field(default_factory=ModelConfig)
    goal: GoalConfig = field(default_factory=GoalConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self) -> None:
        validate(self)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump())

    def override(self, **changes: Any) -> "RunConfig":
        return from_dict(deep_update(self.to_dict(), changes))


_RUN_DEFAULTS = {
    f.name: f.default for f in fields(RunConfig) if f.name not in ("model", "goal", "policy", "optim")
}


def validate(cfg: RunConfig) -> None:
    p = cfg.policy
    if p.horizon % p.goal_duration:
        raise ConfigError(f"horizon {p.horizon} must be a multiple of goal duration {p.goal_duration}")
    if p.goal_reward not in GOAL_REWARDS:
        raise ConfigError(f"goal_reward must be one of {GOAL_REWARDS}")
    if p.explore not in EXPLORE_PLACEMENTS:
        raise ConfigError(f"explore must be one of {EXPLORE_PLACEMENTS}")
    if p.abstract_discount not in ABSTRACT_DISCOUNTS:
        raise ConfigError(f"abstract_discount must be one of {ABSTRACT_DISCOUNTS}")
    if not (0 <= p.discount <= 1 and 0 <= p.return_lambda <= 1):
        raise ConfigError("discount and return_lambda must lie in [0, 1]")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg.parallel_envs < 1 or cfg.train_every < 1:
        raise ConfigError("parallel_envs and train_every must be positive")
    if cfg.replay_capacity // cfg.parallel_envs <= cfg.batch_length:
        raise ConfigError("replay capacity per env must exceed the batch length")


NESTED = {"model": ModelConfig, "goal": GoalConfig, "policy": PolicyConfig,
          "optim": OptimizerConfig}


def _coerce(value: Any, default: Any, where: str) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        if isinstance(default, int) and not float(value).is_integer():
            raise ConfigError(f"{where} must be an integer")
        return type(default)(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{where} must be of type {type(default).__name__}")
    return value


def _section(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    defaults = cls() if cls is not RunConfig else None
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if cls is RunConfig and name in NESTED:
            kwargs[name] = _section(NESTED[name], value, name)
            continue
        default = getattr(defaults, name) if defaults is not None else _RUN_DEFAULTS[name]
        kwargs[name] = _coerce(value, default, f"{where}.{name}".strip("."))
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> RunConfig:
    return _section(RunConfig, data, "")


def deep_update(base: dict, changes: dict) -> dict:
    out = dict(base)
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_update(out[key], value)
        else:
            out[key] = value
    return out


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "parallel_envs": 4,
        "batch_size": 16,
        "batch_length": 32,
        "replay_capacity": 100_000,
        "model": {"deter": 128, "stoch": 32, "mlp_layers": 2, "mlp_units": 128, "cnn_depth": 8},
    },
    "tiny": {
        "parallel_envs": 1,
        "batch_size": 4,
        "batch_length": 16,
        "replay_capacity": 10_000,
        "model": {"image_size": 16, "deter": 32, "stoch": 8, "mlp_layers": 1,
                  "mlp_units": 32, "cnn_depth": 4},
    },
}


def load_config(source: str | Path | None = None, **overrides: Any) -> RunConfig:
    """Defaults, then a preset name or YAML file, then keyword overrides."""
    data = RunConfig().to_dict()
    if source is not None:
        if str(source) in PRESETS:
            layer = PRESETS[str(source)]
        else:
            path = Path(source)
            if not path.exists():
                raise ConfigError(f"config {source!r} is neither a preset nor a file")
            layer = yaml.safe_load(path.read_text()) or {}
        data = deep_update(data, layer)
    data = deep_update(data, {k: v for k, v in overrides.items() if v is not None})
    return from_dict(data)

