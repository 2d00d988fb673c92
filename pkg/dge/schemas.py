# dge/schemas.py
# Purpose: pydantic models for run configuration, metrics records, budget reports
# and HTTP request bodies. Every config section forbids unknown keys.

from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from dge.router import GranularitySet


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class EncoderConfig(_Section):
    image_size: int = Field(default=32, ge=1)
    patch_size: int = Field(default=4, ge=1)
    in_channels: int = Field(default=1, ge=1)
    num_classes: int = Field(default=8, ge=2)
    channels: int = Field(default=64, ge=1)
    heads: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0)
    depth: int = Field(default=4, ge=1)
    pre_norm: Literal[True] = True
    phi: List[int] = Field(default_factory=lambda: [1, 2, 4])
    region_size: Optional[int] = Field(default=None, ge=0)  # None: max(phi); 0: whole map (layer-wise)
    gamma: float = Field(default=0.5, ge=0.0, le=1.0)
    lam: float = Field(default=1.0, gt=0.0)
    tau: float = Field(default=1.0, gt=0.0)
    dense: bool = False

    @field_validator("phi", mode="before")
    @classmethod
    def _split_phi(cls, v):
        if isinstance(v, str):
            return [int(p) for p in v.replace(",", " ").split()]
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} is not divisible by heads={self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size={self.image_size} is not divisible by patch_size={self.patch_size}")
        gran = GranularitySet.build(self.phi, self.region_size)
        if self.region_size != 0 and gran.region_size > self.grid_size:
            raise ValueError(f"region_size={gran.region_size} exceeds the {self.grid_size}x{self.grid_size} token grid")
        return self

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def granularity(self) -> GranularitySet:
        return GranularitySet.build(self.phi, self.region_size)


class DatasetSpec(_Section):
    image_size: int = Field(default=32, ge=4)
    num_classes: int = Field(default=8, ge=2, le=8)
    noise: float = Field(default=0.2, ge=0.0)
    window: int = Field(default=12, ge=3)
    train_size: int = Field(default=2000, ge=1)
    val_size: int = Field(default=500, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _window_fits(self):
        if self.window > self.image_size:
            raise ValueError(f"signal window {self.window} is larger than the {self.image_size}px image")
        return self


class OptimConfig(_Section):
    lr: float = Field(default=3e-4, gt=0)
    weight_decay: float = Field(default=0.05, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


class TrainConfig(_Section):
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    max_steps: int = Field(default=0, ge=0)  # 0: run all epochs
    log_every: int = Field(default=10, ge=1)
    precision: Literal["f32", "f64"] = "f32"
    log_wall_clock: bool = False


class RunConfig(_Section):
    seed: int = 0
    out_dir: str = "runs/default"
    model: EncoderConfig = Field(default_factory=EncoderConfig)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @model_validator(mode="after")
    def _dims_agree(self):
        if self.dataset.image_size != self.model.image_size:
            raise ValueError(f"dataset.image_size={self.dataset.image_size} != model.image_size={self.model.image_size}")
        if self.dataset.num_classes != self.model.num_classes:
            raise ValueError(f"dataset.num_classes={self.dataset.num_classes} != model.num_classes={self.model.num_classes}")
        if self.model.in_channels != 1:
            raise ValueError("the glyph dataset is grayscale; model.in_channels must be 1")
        return self

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)


class MetricsRecord(BaseModel):
    step: int
    epoch: int
    task_loss: float
    budget_loss: float
    beta: float
    accuracy: float
    psi: List[float]
    wall_clock: Optional[float] = None


class LayerBudget(BaseModel):
    layer: int
    height: int
    width: int
    psi: float
    soft_psi: Optional[float] = None
    per_query_cost: float
    dense_queries: int
    beta: float
    dynamic_flops: float
    static_flops: float


class BudgetReport(BaseModel):
    layers: List[LayerBudget]
    beta: float
    dynamic_flops: float
    static_flops: float
    total_flops: float
    images: int = 1


class RunRequest(BaseModel):
    """Overrides applied on top of the default RunConfig."""
    seed: Optional[int] = None
    budget: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    phi: Optional[List[int]] = None
    precision: Optional[Literal["f32", "f64"]] = None
    config: dict = Field(default_factory=dict)


class RoutingRequest(BaseModel):
    job_id: str
    image: List[List[float]]
    checkpoint: Literal["best", "final"] = "best"
