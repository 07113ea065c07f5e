"""Synthetic desk-scale benchmark scene: a soft blob on a gradient
background, dragged 16 pixels to the right. Shared by the acceptance
suite, the CLI demo fixture, and the frontend round-trip test."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .engine import DragConfig
from .softmask import PointPair

BLOB_HANDLE = (24, 32)
BLOB_TARGET = (40, 32)
SCENE_SIZE = 64
OUTSIDE_MASK_LEVEL = 0.05


def blob_scene() -> np.ndarray:
    """64x64 RGB float image: a warm blob on a flat background.

    The flat background survives the toy encode/decode round trip
    exactly, so any edit spill outside the mask is measurable on its own.
    """
    size = SCENE_SIZE
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    blob = np.exp(-(((xs - BLOB_HANDLE[0]) ** 2 + (ys - BLOB_HANDLE[1]) ** 2) / (2 * 5.0**2)))
    image = np.stack(
        [
            0.25 + 0.70 * blob,
            0.25 + 0.45 * blob,
            0.25 + 0.15 * blob,
        ],
        axis=-1,
    )
    return np.clip(image, 0.0, 1.0)


def blob_pairs() -> list:
    return [PointPair(handle=BLOB_HANDLE, target=BLOB_TARGET)]


def blob_drag_config(**overrides) -> DragConfig:
    """Drag settings sized for the 8x8 latent of the blob scene."""
    params = dict(
        drag_steps_per_denoise=12,
        patch_radius=1,
        tracking_radius=2,
        learning_rate=0.05,
        max_drag_iterations=60,
        rg_weight=350.0,
        rho=0.15,
        mask_sigma=6.0,
        latent_timestep=35,
        use_motion_supervision=True,
        feature_layer=0,
    )
    params.update(overrides)
    return DragConfig(**params)


def write_blob_scene(path) -> None:
    """Save the blob fixture as an 8-bit PNG."""
    data = np.round(255.0 * blob_scene()).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def outside_mask_region(mask_values: np.ndarray) -> np.ndarray:
    """Boolean region treated as untouched background for fidelity checks."""
    return mask_values <= OUTSIDE_MASK_LEVEL


def outside_mask_mae(
    original: np.ndarray, edited: np.ndarray, mask_values: np.ndarray
) -> float:
    region = outside_mask_region(mask_values)
    if not region.any():
        raise ValueError("mask leaves no outside region to measure")
    return float(np.mean(np.abs(original[region] - edited[region])))
