"""Training configuration and its plain ``key = value`` file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .envs import ENVIRONMENTS
from .errors import ValidationError

ALGORITHMS = ("marpo", "mappo")
CLIP_MODES = ("kl", "fixed")
OPTIMIZERS = ("adam", "sgd")
A_SEL_MODES = ("next", "literal")

# named (kl_bias, beta) settings for the controller
PRESETS: dict[str, dict[str, float]] = {
    "marpo1": {"kl_bias": 0.05, "beta": 0.05},
    "marpo2": {"kl_bias": 0.08, "beta": 0.08},
    "marpo3": {"kl_bias": 0.10, "beta": 0.08},
    "marpo4": {"kl_bias": 0.10, "beta": 0.01},
}


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "marpo"
    env_name: str = ""
    iterations: int = 40
    epochs: int = 5
    minibatch_size: int = 256
    rollout_steps: int = 500
    alpha: float = 0.5
    sigma: float = 0.01
    beta: float = 0.9
    kl_bias: float = 0.05
    baseline_epsilon: float = 0.2
    learning_rate: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    seed: int = 0
    eval_episodes: int = 32
    eval_interval: int = 1
    # choices the update rule leaves open
    clip_mode: str = "kl"
    a_sel: str = "next"
    next_target_scale: float = 1.0
    value_coef: float = 0.5
    optimizer: str = "adam"
    hidden_size: int = 64
    normalize_advantages: bool = True
    n_envs: int = 8

    def validate(self) -> "TrainConfig":
        if not self.env_name:
            raise ValidationError("env_name is required")
        if self.env_name not in ENVIRONMENTS:
            raise ValidationError(f"unknown env_name {self.env_name!r}; choose from {sorted(ENVIRONMENTS)}")
        for name, allowed in (
            ("algorithm", ALGORITHMS),
            ("clip_mode", CLIP_MODES),
            ("optimizer", OPTIMIZERS),
            ("a_sel", A_SEL_MODES),
        ):
            if getattr(self, name) not in allowed:
                raise ValidationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("iterations", "epochs", "minibatch_size", "rollout_steps", "eval_episodes", "eval_interval",
                     "hidden_size", "n_envs"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ValidationError(f"{f.name} must be finite")
        if self.alpha < 0.0:
            raise ValidationError("alpha must be >= 0")
        if self.sigma < 0.0 or self.value_coef < 0.0:
            raise ValidationError("sigma and value_coef must be >= 0")
        if not 0.0 <= self.beta < 1.0:
            raise ValidationError("beta must be in [0, 1)")
        if self.kl_bias < 0.0:
            raise ValidationError("kl_bias must be >= 0")
        if not 0.0 < self.baseline_epsilon < 1.0:
            raise ValidationError("baseline_epsilon must be in (0, 1)")
        if self.learning_rate < 0.0:
            raise ValidationError("learning_rate must be >= 0")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValidationError("gamma and gae_lambda must be in [0, 1]")
        if self.next_target_scale <= 0.0:
            raise ValidationError("next_target_scale must be > 0")
        return self

    def with_preset(self, name: str) -> "TrainConfig":
        try:
            return replace(self, **PRESETS[name])
        except KeyError:
            raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


FIELD_TYPES: dict[str, type] = {f.name: type(f.default) for f in fields(TrainConfig)}


def coerce(name: str, raw: str) -> Any:
    """Parse one textual value into the field's type."""
    if name not in FIELD_TYPES:
        raise ValidationError(f"unknown config key {name!r}")
    kind = FIELD_TYPES[name]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ValidationError(f"bad value for {name}: {raw!r}") from None


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(config: TrainConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(config))


def parse(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``key = value`` lines; ``#`` starts a comment. Missing keys keep defaults."""
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ValidationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = coerce(key, raw)
    return replace(base or TrainConfig(), **values)


def load(path: str | Path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    return parse(text)
