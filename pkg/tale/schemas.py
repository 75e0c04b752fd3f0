import json
import math
from pathlib import Path
from typing import Any, Iterable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, StabilityError

SUPPORTED_VARIANTS = {"polynomial", "mlp", "piecewise", "constant"}
PROCESS_KINDS = {"const_poisson", "piecewise_poisson", "self_exciting", "deterministic_code"}


# Events
class RawEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    timestamp: float
    code: str

    @field_validator("timestamp")
    @classmethod
    def timestamp_must_be_finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("timestamp must be finite")
        return value

    @field_validator("code")
    @classmethod
    def code_must_not_be_blank(cls, value: str) -> str:
        cleaned = value.strip()
        if not cleaned:
            raise ValueError("code must not be empty")
        return cleaned


class SyntheticTruth(BaseModel):
    """Ground-truth process description used by the simulators and the recovery oracles.

    ``piecewise_poisson`` splits [0, T) into ``len(rates)`` equal segments. ``deterministic_code``
    uses ``rate`` for its timing and the cyclic next-code rule.
    """

    model_config = ConfigDict(extra="forbid")

    process_kind: Literal["const_poisson", "piecewise_poisson", "self_exciting", "deterministic_code"]
    rate: float = Field(default=1.0, gt=0)
    rates: list[float] = Field(default_factory=lambda: [0.5, 2.0])
    mu: float = Field(default=0.5, gt=0)
    alpha_h: float = Field(default=0.5, ge=0)
    beta_h: float = Field(default=1.0, gt=0)
    horizon: Optional[float] = Field(default=None, gt=0)
    code_rule: Optional[Literal["cyclic"]] = None

    @field_validator("rates")
    @classmethod
    def rates_must_be_positive(cls, value: list[float]) -> list[float]:
        if not value or any(r <= 0 for r in value):
            raise ValueError("piecewise rates must be a non-empty list of positive values")
        return value

    @model_validator(mode="after")
    def default_code_rule(self) -> "SyntheticTruth":
        if self.process_kind == "deterministic_code" and self.code_rule is None:
            self.code_rule = "cyclic"
        return self

    def check_stable(self) -> None:
        if self.process_kind == "self_exciting" and self.alpha_h >= self.beta_h:
            raise StabilityError(
                f"unstable self-exciting process: alpha_h={self.alpha_h} >= beta_h={self.beta_h}"
            )

    def max_rate(self) -> float:
        if self.process_kind == "piecewise_poisson":
            return max(self.rates)
        if self.process_kind == "self_exciting":
            return self.mu
        return self.rate

    def intensity(self, t: float, history: Iterable[float] = ()) -> float:
        """True conditional intensity at ``t`` given event times strictly before ``t``."""

        if self.process_kind == "piecewise_poisson":
            if self.horizon is None:
                raise ConfigError("piecewise intensity needs the horizon")
            segment = min(int(t / self.horizon * len(self.rates)), len(self.rates) - 1)
            return self.rates[max(segment, 0)]
        if self.process_kind == "self_exciting":
            past = np.asarray([s for s in history if s < t], dtype=np.float64)
            return float(self.mu + self.alpha_h * np.sum(np.exp(-self.beta_h * (t - past))))
        return self.rate


# Run configuration
class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    age_index: Optional[int] = Field(default=None, ge=0)
    max_age_years: float = Field(default=100.0, gt=0)
    window_days: float = Field(default=30.0, gt=0)
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)

    @field_validator("split")
    @classmethod
    def split_must_sum_to_one(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(f < 0 for f in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("split fractions must be non-negative and sum to 1")
        return value


class TimeWeightConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: str = "polynomial"
    order: int = Field(default=5, ge=0)
    mlp_width: int = Field(default=16, ge=1)
    init_bias: float = 2.0
    # initial a_1 of the polynomial; negative values start from a decaying curve
    init_slope: float = 0.0

    @field_validator("variant")
    @classmethod
    def validate_variant(cls, value: str) -> str:
        normalized = value.lower()
        if normalized not in SUPPORTED_VARIANTS:
            raise ValueError(f"variant must be one of {sorted(SUPPORTED_VARIANTS)}")
        return normalized

    @model_validator(mode="after")
    def slope_needs_polynomial(self) -> "TimeWeightConfig":
        if self.init_slope != 0.0 and (self.variant != "polynomial" or self.order < 1):
            raise ValueError("init_slope applies to polynomial weights of order >= 1 only")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = Field(default=64, ge=1)
    d_z: int = Field(default=32, ge=1)
    window: int = Field(default=1024, ge=1)
    g_hidden: list[int] = Field(default_factory=lambda: [64, 64, 32])
    f_hidden: list[int] = Field(default_factory=lambda: [64, 64])


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma_mix: float = Field(default=1.0, ge=0)
    focal_alpha: float = Field(default=0.25, gt=0)
    focal_gamma: float = Field(default=2.0, ge=0)
    smooth_pos: float = Field(default=0.95, gt=0.5, le=1.0)
    smooth_neg: float = Field(default=0.05, ge=0.0, lt=0.5)
    n_mc: Optional[int] = Field(default=None, ge=1)
    integration: Literal["mc", "grid"] = "mc"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pretrain_epochs: int = Field(default=10, ge=1)
    pretrain_lr: float = Field(default=1e-4, gt=0)
    batch_size: int = Field(default=16, ge=1)
    finetune_epochs: int = Field(default=5, ge=1)
    finetune_lr_pretrained: float = Field(default=1e-5, gt=0)
    finetune_lr_new: float = Field(default=1e-4, gt=0)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)
    grad_clip: Optional[float] = Field(default=5.0, gt=0)
    task_weight: Optional[float] = Field(default=None, gt=0)
    seed: int = Field(default=0, ge=0)

    @field_validator("adam_betas")
    @classmethod
    def betas_in_unit_interval(cls, value: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 <= b < 1.0 for b in value):
            raise ValueError("adam betas must lie in [0, 1)")
        return value


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataConfig = Field(default_factory=DataConfig)
    time_weight: TimeWeightConfig = Field(default_factory=TimeWeightConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


def parse_value(raw: str) -> Any:
    text = raw.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignments(lines: Iterable[str], source: str = "<flags>") -> dict[str, Any]:
    """Parse ``section.key = value`` lines into a nested dict."""

    tree: dict[str, Any] = {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{line_no}: empty key")
        node = tree
        *sections, leaf = key.split(".")
        for section in sections:
            child = node.setdefault(section, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{source}:{line_no}: {key} conflicts with a scalar key")
            node = child
        node[leaf] = parse_value(value)
    return tree


def merge_config(base: dict[str, Any], updates: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                    base: dict[str, Any] | None = None) -> RunConfig:
    """Build and fully validate a RunConfig; later sources win (base < file < overrides)."""

    tree = dict(base or {})
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        tree = merge_config(tree, parse_assignments(text.splitlines(), str(path)))
    tree = merge_config(tree, parse_assignments(overrides))
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
