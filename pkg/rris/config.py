import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from rris.errors import DatasetError
from rris.utils import PathLike, read_json

# Load environment variables
load_dotenv()


def default_seed() -> int:
    """Master seed from RRIS_SEED, 0 when unset."""
    raw = os.getenv("RRIS_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise DatasetError(f"RRIS_SEED must be an integer, got {raw!r}")


class ModelConfig(BaseModel):
    """Dimensions and loss weights of the toy fusion model."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = 32
    in_channels: int = 3
    stage_channels: Tuple[int, int, int, int] = (8, 16, 16, 16)
    fusion_dim: int = 8
    fusion_heads: int = 2
    decoder_dim: int = 8
    head_heads: int = 2
    vocab_size: int = 64
    language_dim: int = 8
    max_text_len: int = 20
    memory_tokens: int = 20
    blank_tokens: int = 10
    seg_weight: float = Field(0.4, ge=0.0, le=1.0)
    exist_weight: float = Field(1.0, ge=0.0)
    init_scale: float = Field(0.02, gt=0.0)
    norm_eps: float = Field(1e-6, gt=0.0)
    seed: int = 0
    query_mode: Literal["V", "T"] = "V"

    @field_validator("image_size")
    @classmethod
    def _stride_aligned(cls, v):
        if v <= 0 or v % 32:
            raise ValueError("image_size must be a positive multiple of 32")
        return v

    @field_validator("memory_tokens", "blank_tokens")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("token counts cannot be negative")
        return v

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.fusion_dim % self.fusion_heads:
            raise ValueError("fusion_dim must be divisible by fusion_heads")
        if self.decoder_dim % self.head_heads:
            raise ValueError("decoder_dim must be divisible by head_heads")
        if self.memory_tokens + self.blank_tokens == 0:
            raise ValueError("at least one memory or blank token is required")
        return self


class GenerationConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    negatives_per_ref: int = Field(10, ge=1)
    max_draws: int = Field(64, ge=1)
    max_retries: int = Field(8, ge=1)
    exclude_absolute_positions: bool = False


class RunConfig(BaseModel):
    """Validated options of one CLI invocation."""

    model_config = ConfigDict(frozen=True)

    subcommand: str
    input: Optional[Path] = None
    output: Optional[Path] = None
    predictions: Optional[Path] = None
    seed: int = Field(default_factory=default_seed, ge=0)
    mode: Literal["train", "val"] = "val"
    negatives_per_ref: int = Field(10, ge=1)
    thresholds: List[float] = [0.5, 0.7, 0.9]
    toy_config: Optional[Path] = None
    as_json: bool = False
    verbose: bool = False

    @field_validator("thresholds")
    @classmethod
    def _open_interval(cls, v):
        if not v:
            raise ValueError("at least one threshold is required")
        for t in v:
            if not 0.0 < t < 1.0:
                raise ValueError(f"threshold {t} outside (0, 1)")
        return v

    @model_validator(mode="after")
    def _inputs_exist(self):
        for name in ("input", "predictions", "toy_config"):
            path = getattr(self, name)
            if path is not None and not path.is_file():
                raise ValueError(f"{name.replace('_', ' ')} not found: {path}")
        return self


def build_run_config(**options) -> RunConfig:
    try:
        return RunConfig(**options)
    except ValidationError as e:
        messages = "; ".join(err["msg"] for err in e.errors())
        raise DatasetError(f"invalid options: {messages}", code="invalid-options")


def load_model_config(path: Optional[PathLike] = None) -> ModelConfig:
    """Model config from a JSON file; defaults when no path is given."""
    if path is None:
        return ModelConfig()
    try:
        return ModelConfig(**read_json(path))
    except (TypeError, ValidationError) as e:
        raise DatasetError(f"invalid model config {path}: {e}")
