from __future__ import annotations

import math
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .core import (
    BaselineConfig,
    ClassifierConfig,
    GrowthConfig,
    PatchSpec,
    PretrainConfig,
    RegimeSpec,
    RegressorConfig,
)


def _default_regimes() -> List[RegimeSpec]:
    return [
        RegimeSpec(name="sparse", count_range=(2, 10), dot_radius_range=(5.0, 7.0)),
        RegimeSpec(name="dense", count_range=(60, 120), dot_radius_range=(1.0, 2.0)),
    ]


class SplitFractions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: float = Field(default=0.7, ge=0, le=1)
    val: float = Field(default=0.15, ge=0, le=1)
    test: float = Field(default=0.15, ge=0, le=1)

    @model_validator(mode="after")
    def _sum_to_one(self) -> "SplitFractions":
        total = self.train + self.val + self.test
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions sum to {total}, expected 1")
        return self

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.train, self.val, self.test


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    regimes: List[RegimeSpec] = Field(default_factory=_default_regimes)
    scenes_per_regime: int = Field(default=150, ge=1)
    image_shape: Tuple[int, int] = (128, 128)
    region_shape: Tuple[int, int] = Field(default=(64, 64), description="area a regime's count_range refers to")
    sigma: float = Field(default=2.0, gt=0)
    splits: SplitFractions = Field(default_factory=SplitFractions)
    patches_per_scene: int = Field(default=16, ge=1, description="fixed training patches per train scene")
    val_patches_per_scene: int = Field(default=8, ge=1)

    @field_validator("image_shape", "region_shape")
    @classmethod
    def _positive(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if min(v) <= 0:
            raise ValueError(f"extents must be positive, got {v}")
        return v

    @field_validator("image_shape")
    @classmethod
    def _on_grid(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if v[0] % 4 or v[1] % 4:
            raise ValueError(f"image_shape {v} must be divisible by 4 (regressor output grid)")
        return v

    @model_validator(mode="after")
    def _unique_regimes(self) -> "DataConfig":
        names = [r.name for r in self.regimes]
        if len(set(names)) != len(names):
            raise ValueError(f"regime names must be unique, got {names}")
        return self


class RunConfig(BaseModel):
    """Every knob of a run; the resolved copy is written next to the artifacts."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    threads: int = Field(default=1, ge=1)
    out_dir: Optional[str] = None
    data: DataConfig = Field(default_factory=DataConfig)
    patch: PatchSpec = Field(default_factory=PatchSpec)
    regressor: RegressorConfig = Field(default_factory=RegressorConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    growth: GrowthConfig = Field(default_factory=GrowthConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)

    @model_validator(mode="after")
    def _patch_fits(self) -> "RunConfig":
        h, w = self.data.image_shape
        if self.patch.roi_h > h or self.patch.roi_w > w:
            raise ValueError(f"patch.roi {self.patch.roi_h}x{self.patch.roi_w} does not fit data.image_shape {h}x{w}")
        return self
