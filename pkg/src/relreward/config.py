"""Run configuration: ``key = value`` files with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError

ALGORITHMS = ("alg1", "alg2")
LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a pipeline run.  Defaults follow the maze settings of the method."""

    layout: str = "open"                 # shipped layout name or path to an ASCII layout
    goal_cell: str = ""                  # "row,col"; empty picks the layout's first goal
    horizon: int = 64
    reward_window: int = 4
    diffusion_steps: int = 100
    n_transitions: int = 50_000
    test_transitions: int = 10_000
    episode_length: int = 192
    diffusion_hidden: tuple = (256, 256)
    reward_hidden: tuple = (128, 64, 32)
    activation: str = "tanh"
    gaussian_skip: bool = True
    diffusion_lr: float = 2e-4
    diffusion_lr_schedule: str = "constant"
    diffusion_batch: int = 64
    diffusion_train_steps: int = 20_000
    reward_lr: float = 5e-5
    reward_lr_schedule: str = "constant"
    reward_batch: int = 256
    reward_train_steps: int = 5_000
    reward_steps_per_sample: int = 0     # 0 uses every trajectory step in the loss
    algorithm: str = "alg1"
    paired_chains: int = 200
    target_mode: str = "mean"
    omega: float = 0.3
    t_stopgrad: int = 2
    steer_episodes: int = 256
    steer_env_steps: int = 100
    discriminate_samples: int = 500
    log_every: int = 100
    seed: int = 0
    out: str = "rrf_out"

    def __post_init__(self):
        positive = ("horizon", "reward_window", "diffusion_steps", "n_transitions", "test_transitions",
                    "episode_length", "diffusion_lr", "diffusion_batch", "diffusion_train_steps",
                    "reward_lr", "reward_batch", "reward_train_steps", "paired_chains",
                    "steer_episodes", "steer_env_steps", "discriminate_samples", "log_every")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigurationError(f"{key} must be positive, got {getattr(self, key)!r}", key=key)
        for key in ("reward_steps_per_sample", "t_stopgrad", "seed", "omega"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"{key} must be >= 0, got {getattr(self, key)!r}", key=key)
        for key in ("diffusion_hidden", "reward_hidden"):
            if not getattr(self, key) or min(getattr(self, key)) < 1:
                raise ConfigurationError(f"{key} needs at least one positive layer width", key=key)
        if self.horizon % self.reward_window:
            raise ConfigurationError(f"reward_window={self.reward_window} does not divide "
                                     f"horizon={self.horizon}", key="reward_window")
        if self.t_stopgrad > self.diffusion_steps:
            raise ConfigurationError(f"t_stopgrad={self.t_stopgrad} exceeds diffusion_steps="
                                     f"{self.diffusion_steps}", key="t_stopgrad")
        if self.reward_steps_per_sample > self.horizon:
            raise ConfigurationError("reward_steps_per_sample exceeds the horizon",
                                     key="reward_steps_per_sample")
        choices = {"algorithm": ALGORITHMS, "target_mode": ("mean", "score"),
                   "diffusion_lr_schedule": LR_SCHEDULES, "reward_lr_schedule": LR_SCHEDULES,
                   "activation": ("tanh", "softplus", "gelu")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigurationError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}",
                                         key=key)
        if self.algorithm == "alg2" and self.target_mode != "mean":
            raise ConfigurationError("alg2 learns from posterior-mean differences; "
                                     "set target_mode = mean", key="target_mode")
        if self.goal_cell and _parse_cell(self.goal_cell) is None:
            raise ConfigurationError(f"goal_cell must look like 'row,col', got {self.goal_cell!r}",
                                     key="goal_cell")

    @property
    def goal(self) -> tuple[int, int] | None:
        return _parse_cell(self.goal_cell) if self.goal_cell else None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def resolved_text(self) -> str:
        """Every effective value, one ``key = value`` line each, in a stable order."""
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


def _parse_cell(text):
    parts = text.split(",")
    if len(parts) != 2:
        return None
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        return None


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "tuple":
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigurationError(f"cannot parse {key} = {text!r} as {kind}", key=key) from None


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"line {n}: unknown key {key!r}", key=key)
        values[key] = parse_value(key, val)
    return values


def parse_config(path=None, **overrides) -> RunConfig:
    """Load ``path`` (if given), apply non-``None`` overrides, validate."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError:
            raise ConfigurationError(f"{path} is not UTF-8 text") from None
        values = parse_config_text(text)
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"unknown key {key!r}", key=key)
        values[key] = parse_value(key, val) if isinstance(val, str) else val
    return RunConfig(**values)
