"""Geometry-aware latent warp initialization.

Masked cells are displaced by an inverse-distance-weighted, stretch-scaled
combination of attenuated drag vectors; the latent is then backward-warped
through the resulting field so the optimization starts already nudged
toward the targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .fields import LatentField, sample_bilinear_many
from .softmask import PointPair, SoftMask

MARCH_STEP = 0.5  # half-pixel ray-march resolution for stretch factors


@dataclass(frozen=True)
class LwfParams:
    """Drag attenuation and support parameters for the warp field."""

    rho: float = 0.15
    weight_epsilon: float = 1e-6
    mask_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidInputError(f"rho must be in [0, 1], got {self.rho}")
        if self.weight_epsilon <= 0:
            raise InvalidInputError("weight_epsilon must be > 0")
        if not 0.0 < self.mask_threshold <= 1.0:
            raise InvalidInputError("mask_threshold must be in (0, 1]")


@dataclass(frozen=True)
class DisplacementField:
    """Per-cell (dx, dy) warp vectors plus the supported-cell mask."""

    vectors: np.ndarray  # (H, W, 2)
    support: np.ndarray  # (H, W) bool

    def __post_init__(self) -> None:
        if self.vectors.ndim != 3 or self.vectors.shape[-1] != 2:
            raise InvalidInputError("vectors must be (H, W, 2)")
        if self.support.shape != self.vectors.shape[:2]:
            raise InvalidInputError("support shape must match vectors")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidInputError("displacement vectors must be finite")
        if np.any(self.vectors[~self.support] != 0.0):
            raise InvalidInputError("unsupported cells must carry (0, 0)")

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def scale_drags(pairs: Sequence[PointPair], rho: float) -> list:
    """Attenuated drag vectors d_i' = rho * (target - handle)."""
    if not 0.0 <= rho <= 1.0:
        raise InvalidInputError(f"rho must be in [0, 1], got {rho}")
    return [
        np.array([rho * (p.target[0] - p.handle[0]), rho * (p.target[1] - p.handle[1])])
        for p in pairs
    ]


def inverse_distance_weights(pixel, handles: Sequence, epsilon: float) -> np.ndarray:
    """Normalized reciprocal-distance weights of a pixel to each handle."""
    if len(handles) == 0:
        raise InvalidInputError("at least one handle is required")
    px, py = pixel
    raw = np.array(
        [1.0 / (math.hypot(px - hx, py - hy) + epsilon) for hx, hy in handles]
    )
    return raw / raw.sum()


def _march_distance(start_x, start_y, ux, uy, mask_values, threshold, max_steps):
    """Distance traveled from start along (ux, uy) while the mask holds.

    Stops at the first half-pixel sample that leaves the image or where
    the bilinearly sampled mask drops below the threshold; returns the
    distance to the last valid sample.
    """
    h, w = mask_values.shape
    steps = np.arange(1, max_steps + 1, dtype=np.float64) * MARCH_STEP
    xs = start_x + steps * ux
    ys = start_y + steps * uy
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    values = sample_bilinear_many(mask_values, np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1))
    alive = inside & (values >= threshold)
    bad = np.nonzero(~alive)[0]
    valid_count = int(bad[0]) if bad.size else int(max_steps)
    return valid_count * MARCH_STEP


def stretch_factor(pixel, handle, drag, mask: SoftMask, threshold: float) -> float:
    """Boundary-ray ratio lambda = clamp(b_pixel / b_handle, 0, 1).

    Both distances are marched along -drag until the mask falls below the
    threshold or the image edge is reached. Zero drags and the handle
    pixel itself stretch by 1.
    """
    dx, dy = float(drag[0]), float(drag[1])
    norm = math.hypot(dx, dy)
    if norm == 0.0:
        return 1.0
    px, py = float(pixel[0]), float(pixel[1])
    hx, hy = float(handle[0]), float(handle[1])
    if px == hx and py == hy:
        return 1.0
    ux, uy = -dx / norm, -dy / norm
    values = mask.values
    h, w = values.shape
    max_steps = int(math.ceil(math.hypot(h, w) / MARCH_STEP)) + 1
    b_pixel = _march_distance(px, py, ux, uy, values, threshold, max_steps)
    b_handle = _march_distance(hx, hy, ux, uy, values, threshold, max_steps)
    if b_handle <= 0.0:
        return 1.0
    return min(max(b_pixel / b_handle, 0.0), 1.0)


def compute_displacement_field(
    mask: SoftMask, pairs: Sequence[PointPair], params: LwfParams
) -> DisplacementField:
    """Blend attenuated drags over every supported cell of the mask."""
    values = mask.values
    h, w = values.shape
    for pair in pairs:
        for point in (pair.handle, pair.target):
            if not (0 <= point[0] < w and 0 <= point[1] < h):
                raise InvalidInputError(f"pair point {point} outside mask {w}x{h}")
    support = values >= params.mask_threshold
    drags = scale_drags(pairs, params.rho)
    handles = [p.handle for p in pairs]
    vectors = np.zeros((h, w, 2), dtype=np.float64)

    ys, xs = np.nonzero(support)
    if xs.size:
        # normalized inverse-distance weights, all cells at once
        dists = np.stack(
            [np.hypot(xs - hx, ys - hy) + params.weight_epsilon for hx, hy in handles]
        )
        weights = (1.0 / dists) / (1.0 / dists).sum(axis=0)

        max_steps = int(math.ceil(math.hypot(h, w) / MARCH_STEP)) + 1
        steps = np.arange(1, max_steps + 1, dtype=np.float64) * MARCH_STEP
        for i, (drag, (hx, hy)) in enumerate(zip(drags, handles)):
            norm = math.hypot(drag[0], drag[1])
            if norm == 0.0:
                lambdas = np.ones(xs.size)
            else:
                ux, uy = -drag[0] / norm, -drag[1] / norm
                # march every supported cell in lockstep along -drag
                px = xs[:, None] + steps[None, :] * ux
                py = ys[:, None] + steps[None, :] * uy
                inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
                sampled = sample_bilinear_many(
                    values, np.clip(px, 0, w - 1), np.clip(py, 0, h - 1)
                )
                alive = inside & (sampled >= params.mask_threshold)
                b_cells = MARCH_STEP * np.cumprod(alive, axis=1).sum(axis=1)
                b_handle = _march_distance(
                    hx, hy, ux, uy, values, params.mask_threshold, max_steps
                )
                if b_handle <= 0.0:
                    lambdas = np.ones(xs.size)
                else:
                    lambdas = np.clip(b_cells / b_handle, 0.0, 1.0)
                at_handle = (xs == hx) & (ys == hy)
                lambdas[at_handle] = 1.0
            coeff = weights[i] * lambdas
            vectors[ys, xs, 0] += coeff * drag[0]
            vectors[ys, xs, 1] += coeff * drag[1]

    vectors[~support] = 0.0
    return DisplacementField(vectors=vectors, support=support)


def warp_latent(latent: LatentField, field: DisplacementField) -> LatentField:
    """Backward warp: every supported cell pulls its value from p - v(p)."""
    c, h, w = latent.values.shape
    if (field.height, field.width) != (h, w):
        raise InvalidInputError(
            f"field {field.height}x{field.width} does not match latent {h}x{w}"
        )
    out = latent.values.copy()
    ys, xs = np.nonzero(field.support)
    if xs.size == 0:
        return latent.with_values(out)
    vx = field.vectors[ys, xs, 0]
    vy = field.vectors[ys, xs, 1]
    moved = (vx != 0.0) | (vy != 0.0)
    src_x = np.clip(xs[moved] - vx[moved], 0, w - 1)
    src_y = np.clip(ys[moved] - vy[moved], 0, h - 1)
    for ch in range(c):
        out[ch, ys[moved], xs[moved]] = sample_bilinear_many(
            latent.values[ch], src_x, src_y
        )
    return latent.with_values(out)
