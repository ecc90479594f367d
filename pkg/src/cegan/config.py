"""Run configuration: one JSON object, unknown keys rejected."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import DEFAULT_ATTRIBUTES, DEFAULT_RATES

VARIANTS = ("baseline", "cegan", "fcegan", "resample", "costsens")
TABLE3_RANGES = ((6, 6), (5, 6), (4, 6), (3, 6), (2, 6))


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    image_h: int = Field(28, ge=8)
    image_w: int = Field(24, ge=8)
    channels: int = Field(3, ge=1, le=255)
    positive_rates: list[float] = Field(default_factory=lambda: list(DEFAULT_RATES))
    attribute_names: list[str] = Field(default_factory=lambda: list(DEFAULT_ATTRIBUTES))
    n_examples: int = Field(5000, ge=5)
    noise_level: float = Field(0.25, ge=0)
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    @field_validator("positive_rates")
    @classmethod
    def _rates(cls, v):
        for r in v:
            if not 0 < r < 1:
                raise ValueError(f"every rate must lie in (0, 1), got {r}")
        return v

    @model_validator(mode="after")
    def _lengths(self):
        if not self.positive_rates or len(self.positive_rates) != len(self.attribute_names):
            raise ValueError("positive_rates and attribute_names need equal, non-zero length")
        if min(self.split_ratios) <= 0 or abs(sum(self.split_ratios) - 1) > 1e-9:
            raise ValueError("split_ratios must be positive and sum to 1")
        return self


class GanSection(_Strict):
    latent_dim: int = Field(100, ge=1)
    iterations: int = Field(2000, ge=1)
    batch_size: int = Field(32, ge=2)
    d_steps_per_g_step: int = Field(1, ge=1)
    learning_rate: float = Field(0.001, gt=0)
    generator_spec: str = "desk_generator"
    discriminator_spec: str = "desk_discriminator"
    classes: Optional[list[int]] = None  # pretrain a subset; default all


class TrainSection(_Strict):
    variant: Literal["baseline", "cegan", "fcegan", "resample", "costsens"] = "cegan"
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(0.001, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    max_steps: Optional[int] = Field(None, ge=1)
    ce_layers: Optional[tuple[int, int]] = None
    discriminator_spec: str = "desk_discriminator"
    train_data: str = "data/train.cgd"
    val_data: str = "data/val.cgd"
    checkpoint_dir: str = "checkpoints"

    @model_validator(mode="after")
    def _ce(self):
        if self.variant in ("cegan", "fcegan"):
            if self.ce_layers is None:
                raise ValueError(f"ce_layers is required for variant {self.variant}")
            if self.ce_layers[0] > self.ce_layers[1]:
                raise ValueError("ce_layers must be an ascending (first, last) pair")
        return self


class EvalSection(_Strict):
    model: str = "models/cegan.cgm"
    dataset: str = "data/test.cgd"
    threshold: float = Field(0.5, gt=0, lt=1)
    name: Optional[str] = None


class SweepSection(_Strict):
    ranges: list[tuple[int, int]] = Field(default_factory=lambda: list(TABLE3_RANGES))
    frozen: bool = False

    @field_validator("ranges")
    @classmethod
    def _ranges(cls, v):
        if not v:
            raise ValueError("at least one range is required")
        for lo, hi in v:
            if lo > hi:
                raise ValueError(f"range ({lo}, {hi}) is not ascending")
        return v


class ReportSection(_Strict):
    inputs: list[str] = Field(default_factory=list)
    percent: bool = True


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    data: DataSection = DataSection()
    gan: GanSection = GanSection()
    train: TrainSection = TrainSection(ce_layers=(3, 6))
    eval: EvalSection = EvalSection()
    sweep: SweepSection = SweepSection()
    report: ReportSection = ReportSection()


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(obj) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a single JSON object")
    try:
        return RunConfig.model_validate(obj)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from None


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return parse_config(obj)
