#!/usr/bin/env python3
"""
Run configuration for Meta-3DSeg.
Configs are JSON files whose keys mirror the RunConfig field names.
"""

import json
import logging
import os
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from .validation import ValidationError

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "META3DSEG_SEED"

Mode = Literal["A", "B", "C", "D"]


class LayerPlan(BaseModel):
    """
    Layer widths of every network in the system.

    g1 maps 3 -> m through ``g1``; g2 maps p = 2m + 3 -> q through ``g2``;
    g3 maps q -> ``max_parts`` logits. The score network f1 maps p through
    ``score_dims`` to a scalar; the task projection maps the part-specific
    feature (max_parts + 1 wide) to ``embed_dim``; the VAE trunk f2 maps
    ``embed_dim`` through ``vae_dims`` to the per-group heads.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    g1: Tuple[int, ...] = (32, 64, 64)
    g2: Tuple[int, ...] = (64, 32)
    max_parts: int = Field(6, ge=2)
    score_dims: Tuple[int, ...] = (32, 16)
    embed_dim: int = Field(16, ge=1)
    vae_dims: Tuple[int, ...] = (32,)

    @field_validator("g1", "g2", "score_dims", "vae_dims")
    @classmethod
    def _positive_widths(cls, widths: Tuple[int, ...]) -> Tuple[int, ...]:
        if not widths or any(w < 1 for w in widths):
            raise ValueError("layer widths must be a non-empty list of positive integers")
        return widths

    @property
    def m(self) -> int:
        return self.g1[-1]

    @property
    def p(self) -> int:
        return 2 * self.m + 3

    @property
    def q(self) -> int:
        return self.g2[-1]


class RunConfig(BaseModel):
    """Every knob of a meta-training or meta-testing run."""
    model_config = ConfigDict(extra="forbid")

    n_way: int = Field(2, ge=1)
    k_shot: int = Field(1, ge=1)
    train_shots: Optional[List[int]] = None
    test_k_shot: Optional[int] = Field(None, ge=1)
    n_query: int = Field(2, ge=0)
    points_per_shape: int = Field(512, ge=1)
    inner_steps: int = Field(100, ge=0)
    inner_lr: float = Field(1e-3, gt=0)
    outer_lr: float = Field(1e-3, gt=0)
    meta_lr: Optional[float] = Field(None, gt=0)
    pretrain_episodes: Optional[int] = Field(None, ge=0)
    episodes_per_epoch: int = Field(20, ge=1)
    meta_epochs: int = Field(10, ge=1)
    meta_batch_size: int = Field(1, ge=1)
    workers: int = Field(1, ge=1)
    phase1_fraction: float = Field(0.5, ge=0.0, le=1.0)
    beta: float = Field(1e-3, ge=0.0)
    mode: Mode = "D"
    theta_m_samples: int = Field(1, ge=1)
    overlay_scale: float = Field(1.0, gt=0)
    test_episodes: int = Field(1, ge=1)
    seed: int = 0
    record_wall_time: bool = False
    categories: Optional[List[str]] = None
    novel: Optional[List[str]] = None
    manifest: Optional[str] = None
    plan: LayerPlan = Field(default_factory=LayerPlan)

    @field_validator("mode", mode="before")
    @classmethod
    def _upper_mode(cls, mode):
        return mode.upper() if isinstance(mode, str) else mode

    @field_validator("train_shots")
    @classmethod
    def _positive_shots(cls, shots: Optional[List[int]]) -> Optional[List[int]]:
        if shots is not None and (not shots or any(k < 1 for k in shots)):
            raise ValueError("train_shots must be a non-empty list of positive integers")
        return shots

    @model_validator(mode="after")
    def _check_disjoint(self) -> "RunConfig":
        if self.categories is not None and self.novel is not None:
            if set(self.categories) & set(self.novel):
                raise ValueError("categories and novel must be disjoint")
        return self

    @property
    def total_episodes(self) -> int:
        return self.episodes_per_epoch * self.meta_epochs

    @property
    def meta_test_shots(self) -> int:
        return self.test_k_shot if self.test_k_shot is not None else self.k_shot

    @property
    def pretrain_total(self) -> int:
        """Supervised theta_t episodes before meta-training; by default only setting A pretrains."""
        if self.pretrain_episodes is not None:
            return self.pretrain_episodes
        return self.total_episodes if self.mode == "A" else 0

    @property
    def meta_learning_rate(self) -> float:
        return self.meta_lr if self.meta_lr is not None else self.outer_lr


def _wrap(error: PydanticValidationError) -> ValidationError:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first.get("loc", ())) or None
    return ValidationError(f"Invalid config: {first.get('msg')}", field)


def build_config(values: dict) -> RunConfig:
    """
    Validate a dict of config values, applying the seed override.

    Raises:
        ValidationError: If any value is invalid
    """
    values = dict(values)
    env_seed = os.getenv(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ValidationError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}", "seed")
        logger.info(f"Seed overridden from {SEED_ENV_VAR}: {values['seed']}")
    try:
        return RunConfig(**values)
    except PydanticValidationError as e:
        raise _wrap(e)


def load_config(path: str) -> RunConfig:
    """
    Load a RunConfig from a JSON file.

    Raises:
        ValidationError: If the file is missing, unreadable or invalid
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            values = json.load(f)
    except OSError as e:
        raise ValidationError(f"Cannot read config {path}: {e}", "config")
    except json.JSONDecodeError as e:
        raise ValidationError(f"Config {path} is not valid JSON: {e}", "config")
    if not isinstance(values, dict):
        raise ValidationError("Config must be a JSON object", "config")
    return build_config(values)


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
