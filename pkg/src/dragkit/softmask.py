"""Automatic soft mask generation from drag instructions.

Every handle->target pair is rasterized along the straight line between
its endpoints; the union of all path cells is blurred and max-normalized
into a [0, 1] mask of the editable region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .fields import ScalarGrid2D, gaussian_blur, normalize_max


@dataclass(frozen=True)
class PointPair:
    """One drag instruction: integer pixel handle (x0, y0) -> target (x1, y1)."""

    handle: tuple
    target: tuple

    def __post_init__(self) -> None:
        for name, point in (("handle", self.handle), ("target", self.target)):
            if len(point) != 2 or not all(isinstance(v, (int, np.integer)) for v in point):
                raise InvalidInputError(f"{name} must be two integers, got {point!r}")
        object.__setattr__(self, "handle", (int(self.handle[0]), int(self.handle[1])))
        object.__setattr__(self, "target", (int(self.target[0]), int(self.target[1])))

    @property
    def displacement(self) -> tuple:
        return (self.target[0] - self.handle[0], self.target[1] - self.handle[1])


@dataclass(frozen=True)
class PathRaster:
    """Line samples for one pair: N cells with their blend weights."""

    sample_count: int
    blend_weights: tuple
    cells: tuple


@dataclass(frozen=True)
class SoftMask:
    """Normalized [0, 1] mask with the blur width it was built with."""

    grid: ScalarGrid2D
    sigma: float

    @property
    def values(self) -> np.ndarray:
        return self.grid.values


def round_half_away(v: float) -> int:
    """Round to nearest integer with .5 ties away from zero."""
    if v >= 0:
        return int(math.floor(v + 0.5))
    return int(math.ceil(v - 0.5))


def _check_inside(point, dims, what: str) -> None:
    h, w = dims
    x, y = point
    if not (0 <= x < w and 0 <= y < h):
        raise InvalidInputError(f"{what} {point} outside {w}x{h} image")


def rasterize_drag_path(pair: PointPair, dims: tuple) -> PathRaster:
    """Sample N = max(|dx|, |dy|) + 1 points along the handle->target line.

    Cells are the rounded interpolation points; duplicates may appear in
    the list, but a cell is only ever marked once in the mask.
    """
    _check_inside(pair.handle, dims, "handle")
    _check_inside(pair.target, dims, "target")
    x0, y0 = pair.handle
    x1, y1 = pair.target
    n = max(abs(x1 - x0), abs(y1 - y0)) + 1
    if n == 1:
        return PathRaster(sample_count=1, blend_weights=(0.0,), cells=((x0, y0),))
    alphas = tuple(k / (n - 1) for k in range(n))
    cells = tuple(
        (
            round_half_away((1 - a) * x0 + a * x1),
            round_half_away((1 - a) * y0 + a * y1),
        )
        for a in alphas
    )
    return PathRaster(sample_count=n, blend_weights=alphas, cells=cells)


def generate_soft_mask(pairs: Sequence[PointPair], dims: tuple, sigma: float) -> SoftMask:
    """Union of all path rasters, blurred by sigma and max-normalized."""
    if len(pairs) == 0:
        raise InvalidInputError("at least one point pair is required")
    if sigma < 0:
        raise InvalidInputError(f"sigma must be >= 0, got {sigma}")
    h, w = dims
    marks = np.zeros((h, w), dtype=np.float64)
    for pair in pairs:
        raster = rasterize_drag_path(pair, dims)
        for x, y in raster.cells:
            marks[y, x] = 1.0
    blurred = gaussian_blur(marks, sigma)
    return SoftMask(grid=ScalarGrid2D(normalize_max(blurred)), sigma=float(sigma))


def pairs_at_scale(pairs: Sequence[PointPair], scale: float, dims: tuple) -> list:
    """Rescale pair coordinates (round-half-away), clamped into dims."""
    h, w = dims
    out = []
    for pair in pairs:
        def _scale(point):
            x = min(max(round_half_away(point[0] * scale), 0), w - 1)
            y = min(max(round_half_away(point[1] * scale), 0), h - 1)
            return (x, y)

        out.append(PointPair(handle=_scale(pair.handle), target=_scale(pair.target)))
    return out


def mask_to_image(mask: SoftMask) -> Image.Image:
    """8-bit grayscale view of the mask (value = round(255 * M))."""
    data = np.round(255.0 * mask.values).astype(np.uint8)
    return Image.fromarray(data, mode="L")


def save_mask_png(mask: SoftMask, path) -> None:
    mask_to_image(mask).save(path, format="PNG")
