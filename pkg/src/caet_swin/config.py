"""Validated run configuration.  Defaults are the published hyperparameters."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .plans import ModelPlan, get_plan

VARIANTS = ("CAET(GAP)", "CAET(Flatten)", "CAET(GMP)", "SWin", "CAET-SWin")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CAEConfig(_Strict):
    batch_size: int = Field(128, gt=0)
    lr_pretrain: float = Field(1e-4, ge=0)
    epochs_pretrain: int = Field(200, ge=0)
    lr_finetune: float = Field(1e-6, ge=0)
    epochs_finetune: int = Field(50, ge=0)
    val_fraction: float = Field(0.2, ge=0, lt=1)
    max_steps: int | None = Field(None, gt=0)


class CAETConfig(_Strict):
    lr: float = Field(1e-3, ge=0)
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(8, gt=0)
    label_smoothing: float = Field(0.1, ge=0, lt=1)
    aggregation: Literal["GMP", "GAP", "Flatten"] = "GMP"


class SwinConfig(_Strict):
    lr: float = Field(1e-5, ge=0)
    weight_decay: float = Field(0.05, ge=0)
    max_epochs: int = Field(50, ge=0)
    patience: int = Field(10, gt=0)
    batch_size: int = Field(4, gt=0)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    label_smoothing: float = Field(0.1, ge=0, lt=1)


class FusionConfig(_Strict):
    lr: float = Field(1e-2, ge=0)
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(16, gt=0)
    dropout: float = Field(0.1, ge=0, lt=1)
    label_smoothing: float = Field(0.1, ge=0, lt=1)


class RunConfig(_Strict):
    plan: Literal["full", "scaled"] = "full"
    seed: int = 0
    folds: int = Field(10, ge=2)
    bootstrap_resamples: int = Field(10000, gt=0)
    variants: tuple[str, ...] = VARIANTS
    cae: CAEConfig = CAEConfig()
    caet: CAETConfig = CAETConfig()
    swin: SwinConfig = SwinConfig()
    fusion: FusionConfig = FusionConfig()

    def model_plan(self) -> ModelPlan:
        return get_plan(self.plan)

    def model_post_init(self, __context) -> None:
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")


class ConfigError(ValueError):
    pass


def load_config(path=None, **overrides) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply top-level overrides."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
