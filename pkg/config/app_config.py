"""
Configuration data structures using Pydantic and Pydantic Settings
"""

import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from utils.enums import AttentionMode, LogLevel, PatienceMetric, Precision, Variant
from .constants import Constants


class ModelConfig(BaseModel):
    """Architecture, sparsity and ablation knobs"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    d_model: int = Field(default=64, ge=2, description="Hidden size of every attention site")
    heads: int = Field(default=4, ge=1, description="Attention heads per site")
    blocks: int = Field(default=2, ge=1, description="Encoder and decoder depth N")
    vocab_size: int = Field(default=16, ge=4, description="Output vocabulary size")
    feature_dim: int = Field(default=32, ge=1, description="Raw per-step feature width of each modality")
    n_enc: Optional[int] = Field(default=None, ge=1, description="Encoder top-n budget (None: ceil(T_k/4))")
    n_dec: Optional[int] = Field(default=None, ge=1, description="Decoder enc-dec top-n budget (None: ceil(T_k/4))")
    r: int = Field(default=2, ge=-1, description="Local correlation radius (-1 disables)")
    alpha_enc: float = Field(default=0.8, ge=0.0, le=1.0, description="Mixing coefficient at encoder sites")
    alpha_dec: float = Field(default=0.0, ge=0.0, le=1.0, description="Mixing coefficient at decoder enc-dec sites")
    variant: Variant = Field(default=Variant.SBAT, description="Ablation variant")
    max_src_len: int = Field(default=128, ge=1, description="Longest accepted feature sequence")
    max_tgt_len: int = Field(default=16, ge=2, description="Longest accepted caption including BOS/EOS")
    positional_encoding: bool = Field(default=True, description="Add sinusoidal positions to all streams")
    dtype: Precision = Field(default=Precision.FLOAT32, description="Parameter and activation precision")
    force_dense: bool = Field(default=False, description="Use all-true masks at every attention site")
    cross_modal: Optional[bool] = Field(default=None, description="Override the variant's cross-modal layer presence")
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0,
                           description="Dropout on embeddings and sublayer outputs while training (0 disables)")

    @model_validator(mode="after")
    def validate_shapes(self) -> "ModelConfig":
        """Validate head split, positional table width and the decoder alpha rule"""
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.positional_encoding and self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even for positional encoding, got {self.d_model}")
        if self.variant != Variant.VANILLA and self.alpha_dec != 0.0:
            raise ValueError("alpha_dec must be 0 for every sparse variant")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def has_cross_modal(self) -> bool:
        if self.cross_modal is not None:
            return self.cross_modal
        return self.variant not in (Variant.VANILLA, Variant.SBAT_NO_CM)

    @property
    def encoder_mode(self) -> AttentionMode:
        if self.force_dense or self.variant == Variant.VANILLA:
            return AttentionMode.VANILLA
        if self.variant == Variant.SBAT_SAMPLE:
            return AttentionMode.EQUIDISTANT
        return AttentionMode.BOUNDARY

    @property
    def encoder_radius(self) -> int:
        if self.encoder_mode != AttentionMode.BOUNDARY or self.variant == Variant.SBAT_NO_LOCAL:
            return Constants.RADIUS_DISABLED
        return self.r

    @property
    def decoder_mode(self) -> AttentionMode:
        if self.force_dense or self.variant == Variant.VANILLA:
            return AttentionMode.VANILLA
        return AttentionMode.BOUNDARY

    @property
    def numpy_dtype(self):
        return np.float32 if self.dtype == Precision.FLOAT32 else np.float64

    @staticmethod
    def default_budget(t_k: int) -> int:
        """ceil(T_k / 4), roughly one key per scenario for 3-5 scenario clips"""
        return max(1, math.ceil(t_k / 4))

    def encoder_budget(self, t_k: int) -> int:
        return min(t_k, self.n_enc if self.n_enc is not None else self.default_budget(t_k))

    def decoder_budget(self, t_k: int) -> int:
        return min(t_k, self.n_dec if self.n_dec is not None else self.default_budget(t_k))


class TrainConfig(BaseModel):
    """Optimisation schedule and reproducibility settings"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lr_initial: float = Field(default=1e-4, gt=0, description="Learning rate before the drop")
    lr_drop: float = Field(default=2e-5, gt=0, description="Learning rate after the drop")
    patience_epochs: int = Field(default=10, ge=1, description="Stagnant epochs before the drop")
    batch_size: int = Field(default=32, ge=1, description="Samples per optimizer step")
    max_epochs: int = Field(..., ge=1, description="Number of epochs to run")
    seed: int = Field(default=0, ge=0, description="Seed for initialisation and shuffling")
    metric_for_patience: PatienceMetric = Field(default=PatienceMetric.TOKEN_ACCURACY,
                                                description="Validation metric driving the lr drop")
    grad_clip: float = Field(default=Constants.GRAD_CLIP_NORM, ge=0, description="Global-norm clip (0 disables)")

    @model_validator(mode="after")
    def validate_schedule(self) -> "TrainConfig":
        """The drop must lower the learning rate"""
        if not self.lr_drop < self.lr_initial:
            raise ValueError(f"lr_drop ({self.lr_drop}) must be below lr_initial ({self.lr_initial})")
        return self


class RunSettings(BaseSettings):
    """Process-level settings read from SBAT_* environment variables"""

    model_config = SettingsConfigDict(env_prefix=Constants.ENV_PREFIX, case_sensitive=False, extra="ignore")

    threads: Optional[int] = Field(default=None, ge=1, description="Worker thread cap (default: machine cores)")
    log_level: str = Field(default="info", description="Logging level (debug, info, warning, error)")
    log_file: Optional[str] = Field(default=None, description="Log file path (default: platform log dir)")

    @field_validator('log_level')
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level value"""
        valid_levels = {level.value for level in LogLevel}
        if v.lower() not in valid_levels:
            raise ValueError(f"Log level must be one of: {', '.join(sorted(valid_levels))}")
        return v.lower()
