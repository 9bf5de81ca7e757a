"""Training configuration, the flat key-value config file format, and
deterministic per-purpose seed derivation.

Config files are flat YAML mappings whose keys mirror TrainConfig field names
exactly; nested environment settings use dotted keys (``env.image_size``).
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .env import EnvConfig, EnvError

AGENT_VARIANTS = ("tia", "dreamer", "dreamer_inverse")
WIDTH_MULTIPLIERS = (0.5, 1.0, 2.0)

# Per-element Gaussian NLL at zero error: 0.5 * ln(2*pi).
NLL_FLOOR = 0.5 * math.log(2.0 * math.pi)

# Each half of the two-model variant gets ~half the single-model parameter
# budget; dense layers scale quadratically in width, hence 1/sqrt(2).
TWO_MODEL_WIDTH_FACTOR = 1.0 / math.sqrt(2.0)


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent_variant: str = "tia"
    seed: int = 0

    # Objective weights
    lambda_radv: float = 600.0
    lambda_os: float = 2.0
    beta: float = 1.0
    # Optional linear schedules; None keeps the weight constant.
    lambda_radv_final: float | None = None
    lambda_os_final: float | None = None

    # Policy learning
    gamma: float = 0.99
    horizon: int = 15
    return_lambda: float = 0.95
    explore_noise: float = 0.3

    # Data pipeline
    batch: int = 16
    sequence_length: int = 10
    buffer_capacity: int = 100_000
    prefill_episodes: int = 5

    # Cadence
    total_env_steps: int = 50_000
    train_every: int = 5
    checkpoint_every: int = 10_000

    # Model sizes (before width_multiplier scaling)
    width_multiplier: float = 1.0
    stoch_size: int = 16
    deter_size: int = 96
    hidden_units: int = 96
    cnn_depth: int = 24
    min_std: float = 0.1
    free_nats: float = 3.0

    # Optimization
    adversarial_iters: int = 4
    model_lr: float = 6e-4
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    grad_clip: float = 100.0

    # Failure-mode thresholds (operational definitions, config-exposed)
    diagnose_mask_low: float = 0.05
    diagnose_mask_high: float = 0.95
    diagnose_nll_margin: float = 0.05
    diagnose_band_sigma: float = 3.0

    def __post_init__(self):
        if self.agent_variant not in AGENT_VARIANTS:
            raise ConfigError(f"agent_variant must be one of {AGENT_VARIANTS}, got {self.agent_variant!r}")
        if self.width_multiplier not in WIDTH_MULTIPLIERS:
            raise ConfigError(f"width_multiplier must be one of {WIDTH_MULTIPLIERS}, got {self.width_multiplier}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.lambda_radv < 0 or self.lambda_os < 0:
            raise ConfigError("lambda weights must be >= 0")
        for name in (
            "lambda_radv", "lambda_os", "beta", "gamma", "return_lambda", "explore_noise",
            "width_multiplier", "min_std", "free_nats", "model_lr", "actor_lr", "critic_lr",
            "grad_clip",
        ):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        may_be_zero = ("horizon", "adversarial_iters", "total_env_steps")
        for name in (
            "horizon", "batch", "sequence_length", "buffer_capacity", "prefill_episodes",
            "total_env_steps", "train_every", "adversarial_iters", "stoch_size", "deter_size",
            "hidden_units", "cnn_depth",
        ):
            minimum = 0 if name in may_be_zero else 1
            if getattr(self, name) < minimum:
                raise ConfigError(f"{name} out of range: {getattr(self, name)}")

    def scheduled_lambdas(self, env_step: int) -> tuple[float, float]:
        """Current (lambda_radv, lambda_os), linearly interpolated if a final
        value is configured."""
        frac = min(max(env_step / max(self.total_env_steps, 1), 0.0), 1.0)

        def interp(start: float, final: float | None) -> float:
            if final is None:
                return start
            return start + (final - start) * frac

        return interp(self.lambda_radv, self.lambda_radv_final), interp(self.lambda_os, self.lambda_os_final)


def _scaled(value: int, factor: float, minimum: int = 4) -> int:
    return max(minimum, int(round(value * factor)))


@dataclass(frozen=True)
class ModelDims:
    stoch: int
    deter: int
    units: int
    cnn_depth: int


def model_dims(config: TrainConfig, two_model_branch: bool) -> ModelDims:
    """Layer widths after applying the width multiplier; each branch of the
    two-model variant is narrowed so the pair matches one single model's
    parameter budget."""
    factor = config.width_multiplier * (TWO_MODEL_WIDTH_FACTOR if two_model_branch else 1.0)
    return ModelDims(
        stoch=_scaled(config.stoch_size, factor),
        deter=_scaled(config.deter_size, factor),
        units=_scaled(config.hidden_units, factor),
        cnn_depth=_scaled(config.cnn_depth, factor),
    )


def derive_seed(root: int, purpose: str, index: int = 0) -> int:
    """Stable per-purpose seed stream: a pure function of its arguments."""
    token = f"{root}:{purpose}:{index}".encode()
    return zlib.crc32(token) ^ (root & 0xFFFFFFFF) << 16


_ENV_PREFIX = "env."


def config_to_flat_dict(config: TrainConfig) -> dict:
    out = {}
    for f in fields(TrainConfig):
        if f.name == "env":
            for ef in fields(EnvConfig):
                out[_ENV_PREFIX + ef.name] = getattr(config.env, ef.name)
        else:
            out[f.name] = getattr(config, f.name)
    return out


def config_from_flat_dict(flat: dict) -> TrainConfig:
    """Build a TrainConfig from a flat mapping; unknown keys are an error."""
    train_fields = {f.name: f for f in fields(TrainConfig) if f.name != "env"}
    env_fields = {f.name: f for f in fields(EnvConfig)}
    train_kwargs: dict = {}
    env_kwargs: dict = {}
    for key, value in flat.items():
        if key.startswith(_ENV_PREFIX):
            name = key[len(_ENV_PREFIX):]
            if name not in env_fields:
                raise ConfigError(f"unknown config key {key!r}")
            env_kwargs[name] = _coerce(value, env_fields[name].type, key)
        elif key in train_fields:
            train_kwargs[key] = _coerce(value, train_fields[key].type, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return TrainConfig(env=EnvConfig(**env_kwargs), **train_kwargs)
    except (EnvError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(value, type_name, key: str):
    if value is None:
        return None
    type_name = str(type_name)
    try:
        if "int" in type_name and "float" not in type_name:
            if isinstance(value, float) and value != int(value):
                raise ConfigError(f"config key {key!r} expects an integer, got {value}")
            return int(value)
        if "float" in type_name:
            return float(value)
        if "str" in type_name:
            return str(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config key {key!r} has invalid value {value!r}") from exc
    return value


def load_config_file(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config file must be a flat key-value mapping")
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"config file must be flat; key {key!r} holds a nested mapping")
    return config_from_flat_dict(data)


def save_config_file(config: TrainConfig, path: str | Path) -> None:
    flat = config_to_flat_dict(config)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(flat, fh, sort_keys=True)


def replace(config: TrainConfig, **kwargs) -> TrainConfig:
    return dataclasses.replace(config, **kwargs)
