"""Configuration schemas for models, optimisation, training stages, synthesis and sweeps."""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

NUM_LEVELS = 3
W_POLYP_LABELED_FRACTION = 750 / 1450
W_POLYP_LABELED_SHARE = 0.019


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackboneConfig(_Strict):
    in_channels: int = Field(3, description="Image channels.")
    channels: tuple[int, int, int] = Field(
        (64, 32, 16), description="Feature channels for levels l=1 (stride 16), l=2 (stride 8), l=3 (stride 4)."
    )

    @field_validator("channels")
    @classmethod
    def _positive(cls, v: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(c < 1 for c in v):
            raise ValueError("channel counts must be positive")
        return v


class EncoderConfig(_Strict):
    hidden_dim: int = Field(32, description="Channels C of the flattened multi-scale input.")
    heads: int = Field(2, description="Attention heads N_h.")
    points: int = Field(2, description="Sampling points N_p per head and level.")
    levels: int = Field(NUM_LEVELS, description="Feature levels N_l; fixed at 3.")
    ffn_dim: Optional[int] = Field(None, description="FFN hidden width; defaults to 4 * hidden_dim.")
    dropout_rate: float = Field(0.1, description="Dropout probability inside the encoder.")
    encoder_layers: int = Field(1, description="Encoder depth; fixed at a single layer.")

    @field_validator("levels")
    @classmethod
    def _three_levels(cls, v: int) -> int:
        if v != NUM_LEVELS:
            raise ValueError(f"exactly {NUM_LEVELS} feature levels are supported")
        return v

    @field_validator("encoder_layers")
    @classmethod
    def _single_layer(cls, v: int) -> int:
        if v != 1:
            raise ValueError("only a single encoder layer is supported")
        return v

    @field_validator("dropout_rate")
    @classmethod
    def _rate(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        return v

    @model_validator(mode="after")
    def _divisibility(self) -> "EncoderConfig":
        if self.heads < 1 or self.points < 1 or self.hidden_dim < 1:
            raise ValueError("hidden_dim, heads and points must be positive")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if self.hidden_dim % 4:
            raise ValueError("hidden_dim must be a multiple of 4 for the 2-D sinusoidal embedding")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


class ModelConfig(_Strict):
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    use_dten: bool = Field(True, description="Insert the deformable encoder neck between backbone and head.")
    head_dim: Optional[int] = Field(None, description="Hidden channels of the head; defaults to hidden_dim.")

    @model_validator(mode="after")
    def _head(self) -> "ModelConfig":
        if self.head_dim is None:
            self.head_dim = self.encoder.hidden_dim
        return self


class SgdConfig(_Strict):
    learning_rate: float = Field(0.05, description="Initial step size.")
    momentum: float = Field(0.9, description="Heavy-ball momentum.")
    weight_decay: float = Field(0.0005, description="L2 penalty added to the gradient.")
    batch_size: int = Field(4, description="Images per optimisation step.")
    lr_decay: float = Field(0.95, description="Multiplicative learning-rate decay per epoch.")
    max_grad_norm: Optional[float] = Field(
        1.0, description="Rescale the joint gradient to at most this L2 norm before each step; None disables."
    )

    @model_validator(mode="after")
    def _ranges(self) -> "SgdConfig":
        if self.learning_rate < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("learning_rate, momentum and weight_decay must be non-negative")
        if self.momentum >= 1:
            raise ValueError("momentum must be < 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        return self


class Stage(str, Enum):
    WEAK = "weak"
    SEMI = "semi"
    FULL = "full"


class StagePlan(_Strict):
    stage: Stage = Field(Stage.WEAK, description="Which training regime to run.")
    epochs: int = Field(30, description="Passes over the stage's training set.")
    alpha: float = Field(0.5, description="Weight of the sparse foreground loss.")
    beta1: float = Field(0.1, description="Consistency weight for batches holding labeled samples.")
    beta2: float = Field(0.5, description="Consistency weight for fully unlabeled batches.")
    semi_weak: bool = Field(
        True, description="Add L_weak for labeled samples in the semi stage; off trains on beta2 * L_c alone."
    )
    seed: int = Field(1, description="Seed for initialisation, shuffling and dropout.")
    input_size: tuple[int, int] = Field((64, 64), description="Training/evaluation resolution (H, W).")
    threshold: float = Field(0.5, description="Binarisation threshold used for evaluation.")

    @model_validator(mode="after")
    def _ranges(self) -> "StagePlan":
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if min(self.alpha, self.beta1, self.beta2) < 0:
            raise ValueError("alpha, beta1 and beta2 must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        h, w = self.input_size
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ValueError(f"input_size {self.input_size} must be positive multiples of 16")
        return self


class RunConfig(_Strict):
    model: ModelConfig = Field(default_factory=ModelConfig)
    sgd: SgdConfig = Field(default_factory=SgdConfig)
    plan: StagePlan = Field(default_factory=StagePlan)
    workers: int = Field(1, description="Threads used to fan out inference over samples.")
    progress: bool = Field(True, description="Show tqdm progress bars.")


class SynthConfig(_Strict):
    n_train: int = Field(200, description="Training images to generate.")
    n_test: int = Field(50, description="Held-out images (dense GT only).")
    size: int = Field(64, description="Square image side in pixels.")
    labeled_fraction: float = Field(W_POLYP_LABELED_FRACTION, description="Share of train images given scribbles.")
    labeled_share: float = Field(W_POLYP_LABELED_SHARE, description="Target labeled-pixel share of the train split.")
    seed: int = Field(1, description="Generation seed.")

    @model_validator(mode="after")
    def _ranges(self) -> "SynthConfig":
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if not 0 < self.labeled_share < 1:
            raise ValueError("labeled_share must lie in (0, 1)")
        if self.n_train < 1 or self.n_test < 0 or self.size < 16:
            raise ValueError("need n_train >= 1, n_test >= 0 and size >= 16")
        return self


class SweepConfig(_Strict):
    alphas: list[float] = Field([0.0, 0.5, 1.0], description="Sparse foreground weights for WEAK runs.")
    betas: list[tuple[float, float]] = Field(
        [(0.5, 0.5), (0.3, 0.5), (0.1, 0.5), (0.0, 0.5)], description="(beta1, beta2) pairs for SEMI runs."
    )
    use_dten: list[bool] = Field([True], description="Neck on/off variants.")
    consistency_only: bool = Field(False, description="Also train a SEMI student on the consistency loss alone.")
    include_full: bool = Field(False, description="Also train the fully-supervised reference.")
    seeds: list[int] = Field([1, 2, 3], description="Seeds; each seed regenerates the dataset.")
    synth: SynthConfig = Field(default_factory=SynthConfig)
    run: RunConfig = Field(default_factory=RunConfig)


def load_config(path: Path | str | None, model: type[BaseModel] = RunConfig) -> Any:
    """Load a JSON or YAML file into ``model``; ``None`` gives the defaults."""
    if path is None:
        return model()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e


def apply_overrides(config: BaseModel, overrides: dict[str, Any]) -> Any:
    """Return a validated copy of ``config`` with dotted-key overrides applied.

    ``None`` values are skipped so unset CLI flags leave file values alone.
    """
    data = config.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        node[leaf] = value
    try:
        return type(config).model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid override: {e}") from e
