"""Pydantic models for run configuration and YAML preset loading."""

import json
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

SEED_ENV_VAR = "PLBERT_SEED"


class Precision(str, Enum):
    """Storage precision for parameters and optimizer moments."""

    FLOAT32 = "float32"
    FLOAT64 = "float64"


class OovPolicy(str, Enum):
    """What to do with a sentence containing a word missing from the lexicon."""

    SKIP_SENTENCE = "skip_sentence"
    DROP_WORD = "drop_word"


class ModelConfig(BaseModel):
    """Shared-layer encoder shape. Defaults are the full-size architecture."""

    model_config = ConfigDict(frozen=True)

    n_layers: int = Field(default=12, ge=1, description="Number of applications of the shared block")
    hidden: int = Field(default=768, ge=1, description="Hidden width H")
    intermediate: int = Field(default=2048, ge=1, description="Feed-forward width F")
    heads: int = Field(default=12, ge=1, description="Attention heads A")
    embed: int = Field(default=128, ge=1, description="Factorized embedding width E")
    max_len: int = Field(default=512, ge=1, description="Maximum number of phoneme positions")
    phoneme_vocab_size: int = Field(default=42, ge=4, description="V_p, including the 3 specials")
    grapheme_vocab_size: int = Field(default=2, ge=2, description="V_g, including the 2 specials")
    layernorm_eps: float = Field(default=1e-12, gt=0)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    init_std: float = Field(default=0.02, gt=0)
    tie_mlm_weights: bool = Field(default=False, description="Reuse the factorized embedding as the MLM projection")
    precision: Precision = Field(default=Precision.FLOAT32)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.embed > self.hidden:
            raise ValueError(f"embed ({self.embed}) must not exceed hidden ({self.hidden})")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def dtype(self) -> str:
        return Precision(self.precision).value


class MaskPolicy(BaseModel):
    """Whole-word masking probabilities."""

    model_config = ConfigDict(frozen=True)

    select_prob: float = Field(default=0.15, ge=0.0, le=1.0, description="Per-word selection probability")
    mask_prob: float = Field(default=0.8, ge=0.0, le=1.0, description="Selected word replaced by MSK")
    random_prob: float = Field(default=0.1, ge=0.0, le=1.0, description="Selected word replaced by random phonemes")
    keep_prob: float = Field(default=0.1, ge=0.0, le=1.0, description="Selected word left unchanged")

    @model_validator(mode="after")
    def _check_outcomes(self) -> "MaskPolicy":
        total = self.mask_prob + self.random_prob + self.keep_prob
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mask_prob + random_prob + keep_prob must equal 1 (got {total})")
        return self


class TrainConfig(BaseModel):
    """Optimizer, schedule and objective toggles."""

    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(default=16, ge=1)
    max_steps: int = Field(default=1000, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0.0)
    warmup_ratio: float = Field(default=0.1, ge=0.0, le=1.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0)
    clip_norm: float = Field(default=1.0, gt=0)
    p2g_weight: float = Field(default=1.0, ge=0.0, description="lambda applied to the P2G loss")
    use_mlm: bool = Field(default=True)
    use_p2g: bool = Field(default=True)
    score_only_msk: bool = Field(default=False, description="Score MLM only on MSK-outcome positions")
    checkpoint_every: int = Field(default=500, ge=1)
    keep_last_n: int = Field(default=3, ge=1)


class ProbeConfig(BaseModel):
    """Logistic-regression probe fitting."""

    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=300, ge=0)
    learning_rate: float = Field(default=0.05, ge=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    init_std: float = Field(default=0.01, ge=0.0)
    eval_ratio: float = Field(default=0.2, gt=0.0, lt=1.0)
    batch_size: int = Field(default=32, ge=1, description="Records per encoder pass when extracting features")


class RunConfig(BaseModel):
    """Fully resolved configuration of a single CLI invocation."""

    subcommand: str
    seed: int
    options: Dict[str, Any] = Field(default_factory=dict)

    def to_log_line(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)


def load_config(config_path: Path) -> dict:
    """Load a YAML preset file."""
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")

    with open(config_path, 'r') as f:
        config = yaml.safe_load(f) or {}
    if not isinstance(config, dict):
        raise ConfigError(f"Config file must contain a mapping: {config_path}")
    return config


def build_section(model_cls, preset: dict, section: str, overrides: Optional[dict] = None):
    """Instantiate a config model from a preset section plus explicit overrides.

    Args:
        model_cls: Pydantic model class to build
        preset: Parsed preset file
        section: Key of the preset section ("model", "mask", "train", "probe")
        overrides: Values given explicitly on the command line (None values are ignored)

    Returns:
        Validated config instance
    """
    values = dict(preset.get(section) or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid {section} config: {e}") from e


def resolve_seed(seed: Optional[int]) -> int:
    """Explicit seed, else PLBERT_SEED from the environment, else 0."""
    if seed is not None:
        return seed
    env_seed = os.getenv(SEED_ENV_VAR)
    if env_seed is None or env_seed.strip() == "":
        return 0
    try:
        return int(env_seed)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from e


def resolve_run_config(subcommand: str, seed: Optional[int], options: Dict[str, Any]) -> RunConfig:
    """Resolve the seed and collect every effective option of one invocation."""
    seed = resolve_seed(seed)
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    resolved = {
        key: str(value) if isinstance(value, Path) else value
        for key, value in sorted(options.items())
    }
    return RunConfig(subcommand=subcommand, seed=seed, options=resolved)
