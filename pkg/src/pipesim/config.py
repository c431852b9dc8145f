"""Experiment configuration: validated schema, canonical hash, file loading.

A config fully determines a run. Hashing the canonical JSON form gives the
output-directory name, so identical configs land in identical directories
and reruns overwrite byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import DATASET_KINDS
from .linalg import ACTIVATIONS
from .optim import OPTIMIZER_KINDS, OptimizerConfig
from .runtime import STRATEGY_KINDS, STRATEGY_SCHEDULE


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layer_dims: list[int] = Field(min_length=2)
    activations: list[str]

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        for i, d in enumerate(self.layer_dims):
            if d < 1:
                raise ValueError(f"layer_dims[{i}] must be >= 1, got {d}")
        if len(self.activations) != len(self.layer_dims) - 1:
            raise ValueError(
                f"activations has {len(self.activations)} entries for "
                f"{len(self.layer_dims) - 1} layers"
            )
        for i, act in enumerate(self.activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"activations[{i}]: unknown activation {act!r}")
        return self

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


class OptimizerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["sgdm", "adam", "adamw"]
    momentum: float = 0.9
    dampening: float = 0.0
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled_decay: float = 1e-2

    def to_rule(self) -> OptimizerConfig:
        return OptimizerConfig(
            kind=self.kind,
            momentum=self.momentum,
            dampening=self.dampening,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            decoupled_decay=self.decoupled_decay,
        )

    @model_validator(mode="after")
    def _check(self) -> "OptimizerSettings":
        self.to_rule()
        return self


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["serial", "naive", "gpipe", "1f1b"]
    micro_per_mini: int = 1

    @model_validator(mode="after")
    def _check(self) -> "ScheduleConfig":
        if self.micro_per_mini < 1:
            raise ValueError(f"micro_per_mini must be >= 1, got {self.micro_per_mini}")
        if self.kind != "gpipe" and self.micro_per_mini != 1:
            raise ValueError(
                f"micro_per_mini applies to the gpipe schedule only, "
                f"got {self.micro_per_mini} under {self.kind!r}"
            )
        return self


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["synthetic-regression", "two-spirals", "tiny-classification"]
    n_samples: int = 256
    seed: int = 1234
    input_dim: int = 4
    target_dim: int = 1
    n_classes: int = 2
    noise: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "DatasetConfig":
        if self.n_samples < 10:
            raise ValueError(f"n_samples must be >= 10, got {self.n_samples}")
        if self.noise < 0.0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if self.input_dim < 1 or self.target_dim < 1:
            raise ValueError("input_dim and target_dim must be >= 1")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.kind == "two-spirals" and self.n_classes != 2:
            raise ValueError("two-spirals is a 2-class task")
        return self

    @property
    def model_input_dim(self) -> int:
        return 2 if self.kind == "two-spirals" else self.input_dim

    @property
    def model_output_dim(self) -> int:
        if self.kind == "synthetic-regression":
            return self.target_dim
        return self.n_classes

    @property
    def loss_kind(self) -> str:
        return "mse" if self.kind == "synthetic-regression" else "softmax_xent"

    @property
    def n_train(self) -> int:
        return self.n_samples - self.n_samples // 5


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    decay_factor: float = 1.0
    decay_epochs: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "TrainingConfig":
        if self.n_epochs < 1:
            raise ValueError(f"n_epochs must be >= 1, got {self.n_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0.0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not self.decay_factor >= 1.0:
            raise ValueError(f"decay_factor must be >= 1, got {self.decay_factor}")
        if sorted(self.decay_epochs) != self.decay_epochs:
            raise ValueError("decay_epochs must be sorted ascending")
        for e in self.decay_epochs:
            if e < 1:
                raise ValueError(f"decay_epochs entries must be >= 1, got {e}")
        return self

    def lr_at_epoch(self, epoch: int) -> float:
        """Step decay: lr is divided by decay_factor at each listed epoch."""
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr / (self.decay_factor ** drops)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    seed: int = 0
    depth: int
    strategy: Literal[
        "serial",
        "naive",
        "gpipe",
        "async_raw",
        "weight_stashing",
        "two_buffered",
        "spectrain",
        "optimizer_prediction",
    ]
    schedule: ScheduleConfig
    model: ModelConfig
    optimizer: OptimizerSettings
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    dataset: DatasetConfig

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        want = STRATEGY_SCHEDULE[self.strategy]
        if self.schedule.kind != want:
            raise ValueError(
                f"schedule.kind: strategy {self.strategy!r} runs on the "
                f"{want!r} schedule, got {self.schedule.kind!r}"
            )
        if self.strategy == "serial" and self.depth != 1:
            raise ValueError(f"strategy: serial requires depth 1, got depth {self.depth}")
        if self.strategy == "spectrain" and self.optimizer.kind != "sgdm":
            raise ValueError(
                f"optimizer.kind: spectrain predicts with the momentum buffer "
                f"and requires sgdm, got {self.optimizer.kind!r}"
            )
        if self.depth > self.model.n_layers:
            raise ValueError(
                f"depth: {self.depth} stages need at least {self.depth} layers, "
                f"model has {self.model.n_layers}"
            )
        if self.model.layer_dims[0] != self.dataset.model_input_dim:
            raise ValueError(
                f"model.layer_dims: input width {self.model.layer_dims[0]} does not "
                f"match the {self.dataset.kind} input dim "
                f"{self.dataset.model_input_dim}"
            )
        if self.model.layer_dims[-1] != self.dataset.model_output_dim:
            raise ValueError(
                f"model.layer_dims: output width {self.model.layer_dims[-1]} does "
                f"not match the {self.dataset.kind} target dim "
                f"{self.dataset.model_output_dim}"
            )
        if self.training.batch_size > self.dataset.n_train:
            raise ValueError(
                f"training.batch_size: {self.training.batch_size} exceeds the "
                f"{self.dataset.n_train}-sample training split"
            )
        if self.schedule.micro_per_mini > self.training.batch_size:
            raise ValueError(
                f"schedule.micro_per_mini: {self.schedule.micro_per_mini} "
                f"micro-batches cannot split a batch of {self.training.batch_size}"
            )
        return self

    @property
    def steps_per_epoch(self) -> int:
        return self.dataset.n_train // self.training.batch_size

    @property
    def n_batches(self) -> int:
        return self.training.n_epochs * self.steps_per_epoch

    def lr_for_mb(self, mb: int) -> float:
        epoch = (mb - 1) // self.steps_per_epoch + 1
        return self.training.lr_at_epoch(epoch)


def config_from_dict(obj: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(obj)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        raw = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return config_from_dict(obj)


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        msg = err["msg"]
        # pydantic prefixes wrapped ValueErrors; the raw message reads better
        prefix = "Value error, "
        if msg.startswith(prefix):
            msg = msg[len(prefix):]
        parts.append(f"{loc}: {msg}" if loc != "<root>" else msg)
    return "; ".join(parts)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:12]
