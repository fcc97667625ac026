"""Experiment configuration: one JSON file validated against a strict schema."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .decorrelation import DecorrConfig
from .detector import TrainConfig
from .metrics import SPLITS
from .synthetic import DomainSpec

FORMAT_VERSION = 1
OUTPUT_DIR_ENV = "RAPT_OUTPUT_DIR"


class ConfigError(ValueError):
    """Configuration file is unreadable or violates the schema."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainModel(_Strict):
    rho: float = Field(ge=-1.0, le=1.0)
    n_images: int = Field(ge=1)
    proposals_per_image: int = Field(16, ge=2)
    noise_sigma: float = Field(1.0, ge=0.0)
    n_channels: int = Field(32, ge=1)
    relevant_channels: Optional[list[int]] = None
    irrelevant_channels: Optional[list[int]] = None
    seed: Optional[int] = None
    label_strength: float = 1.0
    n_label_channels: int = Field(1, ge=0)
    context_noise: float = Field(0.5, ge=0.0, le=1.0)
    positive_fraction: float = Field(0.5, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _channels(self):
        rel = self.relevant_channels if self.relevant_channels is not None else list(range(self.n_channels - 4))
        irr = self.irrelevant_channels if self.irrelevant_channels is not None else list(
            range(self.n_channels - 4, self.n_channels))
        if set(rel) & set(irr):
            raise ValueError("relevant_channels and irrelevant_channels overlap")
        if any(c < 0 or c >= self.n_channels for c in rel + irr):
            raise ValueError(f"channel indices must lie in [0, {self.n_channels})")
        self.relevant_channels, self.irrelevant_channels = rel, irr
        return self

    def to_spec(self, default_seed: int) -> DomainSpec:
        return DomainSpec(
            rho=self.rho, n_images=self.n_images, proposals_per_image=self.proposals_per_image,
            noise_sigma=self.noise_sigma, relevant_channels=tuple(self.relevant_channels),
            irrelevant_channels=tuple(self.irrelevant_channels),
            seed=self.seed if self.seed is not None else default_seed, n_channels=self.n_channels,
            n_label_channels=self.n_label_channels, label_strength=self.label_strength,
            context_noise=self.context_noise, positive_fraction=self.positive_fraction,
        )


class DomainsModel(_Strict):
    train: list[DomainModel] = Field(min_length=1)
    test: DomainModel


class DecorrModel(_Strict):
    n_rff: int = Field(5, ge=1)
    pair_budget: Union[Literal["all"], int] = "all"
    steps: int = Field(20, ge=1)
    learning_rate: float = Field(1.0, gt=0.0)
    seed: Optional[int] = None
    form: Literal["literal", "conventional"] = "literal"
    line_search: bool = True
    resample_rff_per_batch: bool = False
    foreground_only: bool = False

    @field_validator("pair_budget")
    @classmethod
    def _budget(cls, v):
        if isinstance(v, int) and v < 1:
            raise ValueError('pair_budget must be >= 1 or "all"')
        return v


class TrainModel(_Strict):
    epochs: int = Field(2, ge=1)
    batches_per_epoch: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    head_lr: float = Field(0.0005, gt=0.0)
    k: int = Field(8, ge=1)
    kmeans_iters: int = Field(50, ge=1)
    iou_thresh: float = Field(0.5, gt=0.0, lt=1.0)


class MetricsModel(_Strict):
    splits: list[Literal["Reasonable", "Small", "Heavy", "All"]] = Field(default_factory=lambda: list(SPLITS))
    iou_regime: Literal["0.5", "0.5:0.95"] = "0.5"
    nms_iou: float = Field(0.5, gt=0.0, lt=1.0)
    max_detections: int = Field(100, ge=1)
    overlap_iou: float = Field(0.5, gt=0.0, lt=1.0)


class ExperimentConfig(_Strict):
    seed: int = 0
    output_dir: Optional[str] = None
    domains: DomainsModel
    train: TrainModel = Field(default_factory=TrainModel)
    decorr: DecorrModel = Field(default_factory=DecorrModel)
    metrics: MetricsModel = Field(default_factory=MetricsModel)

    def resolved(self) -> "ExperimentConfig":
        """Copy with every defaulted seed and the output directory filled in."""
        data = self.model_dump()
        for i, dom in enumerate(data["domains"]["train"]):
            if dom["seed"] is None:
                dom["seed"] = self.seed * 1000 + i + 1
        if data["domains"]["test"]["seed"] is None:
            data["domains"]["test"]["seed"] = self.seed * 1000 + 999
        if data["decorr"]["seed"] is None:
            data["decorr"]["seed"] = self.seed
        if data["output_dir"] is None:
            data["output_dir"] = os.environ.get(OUTPUT_DIR_ENV, "rapt_output")
        return ExperimentConfig.model_validate(data)

    def train_specs(self) -> list[DomainSpec]:
        return [d.to_spec(self.seed * 1000 + i + 1) for i, d in enumerate(self.domains.train)]

    def test_spec(self) -> DomainSpec:
        return self.domains.test.to_spec(self.seed * 1000 + 999)

    def train_config(self, reweighting: bool) -> TrainConfig:
        d = self.decorr
        decorr = DecorrConfig(
            n_rff=d.n_rff, pair_budget=d.pair_budget, steps=d.steps, learning_rate=d.learning_rate,
            seed=d.seed if d.seed is not None else self.seed, form=d.form, line_search=d.line_search,
            resample_rff_per_batch=d.resample_rff_per_batch, foreground_only=d.foreground_only,
        )
        t = self.train
        return TrainConfig(
            epochs=t.epochs, batches_per_epoch=t.batches_per_epoch, batch_size=t.batch_size,
            head_lr=t.head_lr, decorr=decorr, k=t.k, kmeans_iters=t.kmeans_iters, seed=self.seed,
            reweighting_enabled=reweighting, iou_thresh=t.iou_thresh,
        )


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "\n".join(lines)


def parse_config(data) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data).resolved()
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return parse_config(data)
