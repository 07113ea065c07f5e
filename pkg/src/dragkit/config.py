"""Engine configuration loading and assembly.

Config files are JSON; unknown keys are rejected with a named error.
The `DRAGKIT_CONFIG` environment variable supplies a fallback path when
the CLI is invoked without --config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .engine import DragConfig, EditResult, run_drag_edit
from .errors import ConfigurationError
from .readout import (
    ReadoutHead,
    load_head,
    normalize_embedding_scale,
    synthetic_triplets,
    train_readout,
)
from .softmask import PointPair
from .toydiffusion import LATENT_CHANNELS, NoiseSchedule, ToyDenoiser, cosine_schedule

ENV_CONFIG_VAR = "DRAGKIT_CONFIG"


class DragSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    drag_steps_per_denoise: int = 10
    patch_radius: int = 4
    tracking_radius: int = 12
    learning_rate: float = 0.02
    max_drag_iterations: int = 80
    rg_weight: float = 350.0
    rho: float = 0.15
    mask_sigma: float = 30.0
    latent_timestep: Optional[int] = None
    use_motion_supervision: bool = False
    feature_layer: int = 0


class ScheduleSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    total_steps: int = 50


class DenoiserSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    smoothing_sigma: float = 0.4
    pyramid_sigmas: tuple = (0.5, 1.0, 2.0)


class ReadoutSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = 6
    margin: float = 0.3
    train_triplets: int = 24
    train_steps: int = 300
    train_learning_rate: float = 0.05
    embedding_rms: float = 0.02
    triplet_shape: tuple = (4, 16, 16)


class EngineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    drag: DragSettings = DragSettings()
    schedule: ScheduleSettings = ScheduleSettings()
    denoiser: DenoiserSettings = DenoiserSettings()
    readout: ReadoutSettings = ReadoutSettings()
    head_path: Optional[str] = None
    output_dir: str = "out"
    debug: bool = False


def load_config(path) -> EngineConfig:
    """Parse a JSON config file, rejecting unknown keys by name."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        return EngineConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid config {path}: {exc}") from exc


def drag_config_from_settings(settings: DragSettings) -> DragConfig:
    return DragConfig(**settings.model_dump())


def train_default_head(
    denoiser: ToyDenoiser,
    schedule: NoiseSchedule,
    settings: ReadoutSettings,
    seed: int,
) -> ReadoutHead:
    """Deterministic synthetic-triplet training used when no head file is
    configured. The trained head's embedding scale is pinned so the
    guidance weight behaves consistently run to run."""
    rng = np.random.default_rng(seed)
    timestep = max(1, schedule.total_steps // 2)
    dataset = synthetic_triplets(
        settings.train_triplets, denoiser, timestep, rng, shape=settings.triplet_shape
    )
    head = ReadoutHead.create(
        layer_channels=[LATENT_CHANNELS] * denoiser.pyramid_levels,
        width=settings.width,
        margin=settings.margin,
        rng=rng,
    )
    head = train_readout(
        dataset, head, steps=settings.train_steps, learning_rate=settings.train_learning_rate
    )
    references = [batch.anchor for batch in dataset]
    return normalize_embedding_scale(head, references, target_rms=settings.embedding_rms)


@dataclass
class Engine:
    """A ready-to-edit bundle of schedule, denoiser, head, and drag config."""

    config: EngineConfig
    schedule: NoiseSchedule
    denoiser: ToyDenoiser
    head: ReadoutHead

    def edit(
        self,
        image: np.ndarray,
        pairs: Sequence[PointPair],
        drag_config: Optional[DragConfig] = None,
        keep_internals: bool = False,
    ) -> EditResult:
        cfg = drag_config or drag_config_from_settings(self.config.drag)
        return run_drag_edit(
            image, pairs, cfg, self.head, self.denoiser, self.schedule, keep_internals
        )


def build_engine(config: Optional[EngineConfig] = None, seed: int = 0) -> Engine:
    config = config or EngineConfig()
    schedule = cosine_schedule(config.schedule.total_steps)
    denoiser = ToyDenoiser(
        smoothing_sigma=config.denoiser.smoothing_sigma,
        pyramid_sigmas=config.denoiser.pyramid_sigmas,
    )
    if config.head_path:
        head = load_head(config.head_path)
    else:
        head = train_default_head(denoiser, schedule, config.readout, seed)
    return Engine(config=config, schedule=schedule, denoiser=denoiser, head=head)
