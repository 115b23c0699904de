"""
Experiment configuration files.

Flat ``key = value`` lines grouped under ``[section]`` headers; ``#`` and
``;`` start comments and keys before the first header belong to ``[run]``.
Each section is validated by a pydantic model that forbids unknown keys, and
every error is reported as a ConfigError naming ``section.key`` and its line.

    env = pendulum
    mode = async_virtual
    max_trajectories = 100
    seeds = 0, 1, 2, 3

    [ensemble]
    beta_ema = 0.9
"""

from __future__ import annotations

import logging
from typing import Annotated, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dynamics import EnsembleSettings
from .envs import ENVIRONMENTS, RewardParams
from .errors import ConfigError
from .neural import Activation
from .policy import TrainConfig
from .workers import AblationParams, RunMode, RunSpec

logger = logging.getLogger(__name__)

DEFAULT_SECTION = "run"


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


IntTuple = Annotated[Tuple[int, ...], BeforeValidator(_split_list)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RunSection(_Section):
    env: str
    mode: RunMode
    max_trajectories: int = Field(ge=1)
    compare_mode: Optional[RunMode] = None
    seeds: IntTuple = (0,)
    speed_multiplier: float = Field(default=1.0, gt=0)
    max_epochs_per_iteration: int = Field(default=50, ge=1)
    audit: bool = False
    keep_idle_events: bool = False

    @field_validator("env")
    @classmethod
    def _known_env(cls, value: str) -> str:
        if value not in ENVIRONMENTS:
            raise ValueError(f"unknown environment '{value}', expected one of {sorted(ENVIRONMENTS)}")
        return value

    @field_validator("seeds")
    @classmethod
    def _nonempty_seeds(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value:
            raise ValueError("at least one seed is required")
        if len(set(value)) != len(value):
            raise ValueError("seeds must be distinct")
        return value

    @model_validator(mode="after")
    def _distinct_compare(self) -> "RunSection":
        if self.compare_mode is not None and self.compare_mode == self.mode:
            raise ValueError("compare_mode must differ from mode")
        return self


class EnvSection(_Section):
    horizon: int = Field(default=200, ge=1)
    dt: float = Field(default=0.05, gt=0)
    omega: float = Field(default=1.0, ge=0)
    v: float = Field(default=1.0, ge=0)
    alpha: float = Field(default=1e-5, gt=0)
    ctrl_penalty: float = Field(default=1e-3, ge=0)
    vel_penalty: float = Field(default=1e-3, ge=0)


class TrainSection(_Section):
    gamma: float = Field(default=0.99, gt=0, le=1)
    gae_lambda: float = Field(default=0.95, ge=0, le=1)
    clip_eps: float = Field(default=0.2, gt=0, lt=1)
    imagined_horizon: int = Field(default=50, ge=1)
    imagined_batch_paths: int = Field(default=32, ge=1)
    policy_lr: float = Field(default=3e-4, ge=0)
    value_lr: float = Field(default=1e-3, ge=0)
    entropy_coef: float = Field(default=0.0, ge=0)
    hidden_sizes: IntTuple = (64, 64)
    activation: Activation = Activation.TANH
    init_log_std: float = -0.5


class EnsembleSection(_Section):
    k: int = Field(default=4, ge=1)
    hidden_sizes: IntTuple = (64, 64)
    activation: Activation = Activation.RELU
    lr: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=64, ge=1)
    capacity_trajectories: int = Field(default=20, ge=1)
    validation_fraction: float = Field(default=0.1, ge=0, lt=1)
    beta_ema: float = Field(default=0.6, ge=0, lt=1)
    early_stopping: bool = True
    state_clip: float = Field(default=100.0, gt=0)
    stochastic_head: bool = False
    start_states: int = Field(default=1000, ge=1)


class AblationSection(_Section):
    n: int = Field(default=1, ge=1)
    e: int = Field(default=1, ge=1)
    g: int = Field(default=1, ge=0)


class CostSection(_Section):
    epoch_duration: Optional[float] = Field(default=None, gt=0)
    grad_step_duration: Optional[float] = Field(default=None, gt=0)
    idle_fraction: float = Field(default=0.1, gt=0)


class EvalSection(_Section):
    every: int = Field(default=5, ge=1)
    episodes: int = Field(default=5, ge=1)


SECTIONS: Dict[str, type] = {
    "run": RunSection,
    "env": EnvSection,
    "train": TrainSection,
    "ensemble": EnsembleSection,
    "ablation": AblationSection,
    "cost": CostSection,
    "eval": EvalSection,
}


class ExperimentConfig(_Section):
    run: RunSection
    env: EnvSection = EnvSection()
    train: TrainSection = TrainSection()
    ensemble: EnsembleSection = EnsembleSection()
    ablation: AblationSection = AblationSection()
    cost: CostSection = CostSection()
    eval: EvalSection = EvalSection()

    @property
    def modes(self) -> List[RunMode]:
        return [self.run.mode] + ([self.run.compare_mode] if self.run.compare_mode else [])

    def run_spec(self, seed: int, mode: Optional[RunMode] = None, threads: Optional[int] = None) -> RunSpec:
        env = self.env
        return RunSpec(
            env_name=self.run.env,
            mode=mode or self.run.mode,
            seed=seed,
            max_trajectories=self.run.max_trajectories,
            horizon=env.horizon,
            dt=env.dt,
            speed_multiplier=self.run.speed_multiplier,
            train=TrainConfig(**self.train.model_dump()),
            ensemble=EnsembleSettings(**self.ensemble.model_dump()),
            ablation=AblationParams(**self.ablation.model_dump()),
            max_epochs_per_iteration=self.run.max_epochs_per_iteration,
            eval_every=self.eval.every,
            eval_episodes=self.eval.episodes,
            epoch_duration=self.cost.epoch_duration,
            grad_step_duration=self.cost.grad_step_duration,
            idle_fraction=self.cost.idle_fraction,
            reward_params=RewardParams(omega=env.omega, v=env.v, alpha=env.alpha, ctrl_penalty=env.ctrl_penalty,
                                       vel_penalty=env.vel_penalty),
            audit=self.run.audit,
            threads=threads,
            keep_idle_events=self.run.keep_idle_events,
        )

    def plan_runs(self, threads: Optional[int] = None) -> List[RunSpec]:
        """One RunSpec per (mode, seed); comparison modes reuse the same seeds."""
        return [self.run_spec(seed, mode, threads) for mode in self.modes for seed in self.run.seeds]


RawConfig = Dict[str, Dict[str, Tuple[str, Optional[int]]]]


def _read_lines(text: str) -> RawConfig:
    raw: RawConfig = {}
    section = DEFAULT_SECTION
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header '{stripped}'", line=lineno)
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section, expected one of {sorted(SECTIONS)}", key=section, line=lineno)
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"expected 'key = value', got '{stripped}'", line=lineno)
        key = key.strip()
        value = value.split(" #")[0].split(" ;")[0].strip()
        if key in raw.get(section, {}):
            raise ConfigError("duplicate key", key=f"{section}.{key}", line=lineno)
        raw.setdefault(section, {})[key] = (value, lineno)
    return raw


def apply_overrides(raw: RawConfig, overrides: Sequence[str]) -> RawConfig:
    """Apply ``section.key=value`` overrides; a bare ``key=value`` targets [run]."""
    for item in overrides:
        dotted, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override '{item}' is not section.key=value")
        section, _, key = dotted.strip().rpartition(".")
        section = section or DEFAULT_SECTION
        if section not in SECTIONS:
            raise ConfigError(f"unknown section, expected one of {sorted(SECTIONS)}", key=dotted.strip())
        raw.setdefault(section, {})[key] = (value.strip(), None)
    return raw


def _validate(raw: RawConfig) -> ExperimentConfig:
    sections = {}
    for name, model in SECTIONS.items():
        entries = raw.get(name, {})
        values = {key: value for key, (value, _) in entries.items()}
        try:
            sections[name] = model(**values)
        except ValidationError as exc:
            first = exc.errors()[0]
            key = str(first["loc"][0]) if first["loc"] else None
            line = entries[key][1] if key in entries else None
            dotted = f"{name}.{key}" if key else name
            raise ConfigError(first["msg"], key=dotted, line=line) from exc
    return ExperimentConfig(**sections)


def parse_config(text: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    config = _validate(apply_overrides(_read_lines(text), overrides))
    logger.debug("parsed config: %s", config)
    return config


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, Activation) or isinstance(value, RunMode):
        return value.value
    return str(value)


def render_config(config: ExperimentConfig) -> str:
    lines: List[str] = []
    for name in SECTIONS:
        section = getattr(config, name)
        lines.append(f"[{name}]")
        for key, value in section.model_dump().items():
            if value is None:
                continue
            lines.append(f"{key} = {_format(value)}")
        lines.append("")
    return "\n".join(lines)
