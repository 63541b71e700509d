from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class OptimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=1e-4, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    lambda_: float = Field(default=1e-2, gt=0, alias="lambda")


class PatchSpec(BaseModel):
    """Patch / RoI geometry in image pixels.

    The regressor predicts at 1/4 scale, so every extent and the RoI margin must
    land on the 4-pixel grid of the output map.
    """

    model_config = ConfigDict(extra="forbid")

    patch_w: int = Field(default=64, gt=0)
    patch_h: int = Field(default=64, gt=0)
    roi_w: int = Field(default=32, gt=0)
    roi_h: int = Field(default=32, gt=0)
    stride: Optional[int] = Field(default=None, description="test-time RoI stride; defaults to roi_w // 2")

    @model_validator(mode="after")
    def _check_geometry(self) -> "PatchSpec":
        if self.roi_w > self.patch_w or self.roi_h > self.patch_h:
            raise ValueError(f"RoI {self.roi_h}x{self.roi_w} exceeds patch {self.patch_h}x{self.patch_w}")
        for name in ("patch_w", "patch_h", "roi_w", "roi_h"):
            if getattr(self, name) % 4:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by 4")
        if (self.patch_w - self.roi_w) % 8 or (self.patch_h - self.roi_h) % 8:
            raise ValueError("patch/RoI margins must be multiples of 4 pixels on each side")
        stride = self.resolved_stride
        if not (0 < stride <= self.roi_w and stride <= self.roi_h):
            raise ValueError(f"stride={stride} must satisfy 0 < stride <= min(roi_w, roi_h)")
        if stride % 4:
            raise ValueError(f"stride={stride} is not divisible by 4")
        return self

    @property
    def resolved_stride(self) -> int:
        return self.stride if self.stride is not None else self.roi_w // 2

    @property
    def margin(self) -> Tuple[int, int]:
        """(top, left) offset of the RoI inside the patch, in pixels."""
        return (self.patch_h - self.roi_h) // 2, (self.patch_w - self.roi_w) // 2

    @property
    def roi_map_shape(self) -> Tuple[int, int]:
        return self.roi_h // 4, self.roi_w // 4


class RegimeSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    count_range: Tuple[int, int] = Field(description="heads per patch-sized region (min, max)")
    dot_radius_range: Tuple[float, float] = Field(description="disc radius in pixels (min, max)")
    texture_seed_space: int = Field(default=16, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "RegimeSpec":
        lo, hi = self.count_range
        if lo < 0 or lo > hi:
            raise ValueError(f"regime {self.name}: count_range {self.count_range} is not an ordered non-negative range")
        rlo, rhi = self.dot_radius_range
        if rlo < 1 or rlo > rhi:
            raise ValueError(f"regime {self.name}: dot_radius_range {self.dot_radius_range} needs 1 <= min <= max")
        return self


class RegressorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    widths: Tuple[int, int, int, int, int] = (16, 32, 16, 8, 1)
    kernels: Tuple[int, int, int, int, int] = (9, 7, 7, 7, 1)

    @model_validator(mode="after")
    def _check(self) -> "RegressorConfig":
        if self.widths[-1] != 1:
            raise ValueError("the last regressor layer must have a single output channel")
        if any(k % 2 == 0 for k in self.kernels):
            raise ValueError(f"kernels {self.kernels} must all be odd")
        return self


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    optim: OptimConfig = Field(default_factory=lambda: OptimConfig(learning_rate=1e-4))
    batch_size: int = Field(default=8, ge=1)
    max_epochs: int = Field(default=40, ge=1)
    patience: int = Field(default=5, ge=1)
    patches_per_epoch: int = Field(default=256, ge=1)
    flip: bool = True
    min_rel_improvement: float = Field(default=0.005, ge=0)


class GrowthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_tree_depth: int = Field(default=3, ge=0)
    fine_tune: OptimConfig = Field(default_factory=lambda: OptimConfig(learning_rate=1e-6))
    loss: LossConfig = Field(default_factory=LossConfig)
    inner_patience: int = Field(default=3, ge=1)
    outer_patience: int = Field(default=1, ge=1)
    tie_epsilon: float = Field(default=0.0, ge=0)
    min_split_fraction: float = Field(default=0.03, ge=0, lt=1)
    max_inner_epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=8, ge=1)
    min_rel_improvement: float = Field(default=0.005, ge=0)


class ClassifierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    optim: OptimConfig = Field(default_factory=lambda: OptimConfig(learning_rate=1e-2))
    widths: Tuple[int, int, int] = (16, 32, 32)
    hidden: int = Field(default=32, ge=1)
    batch_size: int = Field(default=16, ge=1)
    max_epochs: int = Field(default=30, ge=1)
    patience: int = Field(default=4, ge=1)
    min_rel_improvement: float = Field(default=0.005, ge=0)


class MoEConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_experts: int = Field(default=4, ge=2)
    optim: OptimConfig = Field(default_factory=lambda: OptimConfig(learning_rate=1e-4))
    batch_size: int = Field(default=8, ge=1)
    max_epochs: int = Field(default=20, ge=1)
    patience: int = Field(default=4, ge=1)
    patches_per_epoch: int = Field(default=256, ge=1)
    min_rel_improvement: float = Field(default=0.005, ge=0)


class BaselineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    moe: MoEConfig = Field(default_factory=MoEConfig)
    nway_k: List[int] = Field(default_factory=lambda: [4, 8])


class ExpertProfile(BaseModel):
    expert: str
    n: int
    mean: float
    std: float
    share: float
    empty: bool = False

    @field_validator("mean", "std", mode="before")
    @classmethod
    def _null_is_nan(cls, v):
        # JSON has no NaN; empty experts come back as null
        return math.nan if v is None else v


class LevelReport(BaseModel):
    level: int
    n_experts: int
    oracle_mae: float
    actual_mae: float
    classifier_accuracy: float = Field(description="percent")
    train_oracle_mae: Optional[float] = None
    shares: Dict[str, float] = Field(default_factory=dict, description="training-partition share per leaf")
    profile: List[ExpertProfile] = Field(default_factory=list, description="GT counts of the validation patches routed to each leaf")
    note: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "LevelReport":
        if self.oracle_mae > self.actual_mae + 1e-12 * max(1.0, abs(self.actual_mae)):
            raise ValueError(f"level {self.level}: oracle MAE {self.oracle_mae} exceeds actual MAE {self.actual_mae}")
        if self.shares and not math.isclose(sum(self.shares.values()), 1.0, abs_tol=1e-9):
            raise ValueError(f"level {self.level}: leaf shares sum to {sum(self.shares.values())}")
        return self

    @property
    def min_leaf_share(self) -> float:
        return min(self.shares.values()) if self.shares else 1.0

    def table_row(self) -> Dict[str, float]:
        return {
            "level": self.level,
            "n_experts": self.n_experts,
            "oracle_mae": self.oracle_mae,
            "actual_mae": self.actual_mae,
            "classifier_accuracy": self.classifier_accuracy,
            "min_leaf_share": self.min_leaf_share,
        }


class MethodRow(BaseModel):
    """One method of the comparison table.

    ``oracle_mae`` / ``actual_mae`` are patch-level; ``image_mae`` / ``image_mse`` come from
    stitched full-image counts. ``image_mse`` is the root-mean-square form.
    """

    method: str
    n_experts: int
    oracle_mae: Optional[float] = None
    actual_mae: float
    image_mae: float
    image_mse: float = Field(description="root-mean-square error of full-image counts (RMSE form, not squared)")
    note: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "MethodRow":
        if self.oracle_mae is not None and self.oracle_mae > self.actual_mae + 1e-12 * max(1.0, abs(self.actual_mae)):
            raise ValueError(f"{self.method}: oracle MAE {self.oracle_mae} exceeds actual MAE {self.actual_mae}")
        if self.image_mse + 1e-12 * max(1.0, abs(self.image_mae)) < self.image_mae:
            raise ValueError(f"{self.method}: MSE {self.image_mse} below MAE {self.image_mae}")
        return self
