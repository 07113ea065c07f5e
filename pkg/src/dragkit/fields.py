"""Dense real-valued grids and the shared numerical primitives on them:
differentiable bilinear sampling, separable Gaussian blur with edge
replication, and max-normalization.

Coordinates are (x, y) with origin at the top-left corner, x rightward,
y downward; arrays are indexed [y, x] (and [c, y, x] for multi-channel
fields).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.ndimage import convolve1d

from .errors import DegenerateMaskError, InvalidInputError

GridLike = Union["ScalarGrid2D", np.ndarray]


@dataclass(frozen=True)
class ScalarGrid2D:
    """A finite real-valued H×W grid."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidInputError(f"expected a non-empty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("grid values must be finite")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LatentField:
    """A C×H×W latent grid tagged with the diffusion timestep it lives at."""

    values: np.ndarray
    timestep: int = 0

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise InvalidInputError(f"latent must be (C, H, W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("latent values must be finite")
        if self.timestep < 0:
            raise InvalidInputError(f"timestep must be >= 0, got {self.timestep}")
        object.__setattr__(self, "values", arr)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def with_values(self, values: np.ndarray) -> "LatentField":
        return LatentField(values, self.timestep)

    def at_timestep(self, t: int) -> "LatentField":
        return LatentField(self.values, t)


@dataclass(frozen=True)
class FeatureField:
    """Multi-resolution features derived from one latent.

    Layers are ordered fine-to-coarse; resolutions never increase with
    layer index. Every layer is a linear function of the provenance
    latent, so exact adjoints exist (see toydiffusion.features_pullback).
    """

    layers: tuple
    provenance_shape: tuple
    timestep: int

    def __post_init__(self) -> None:
        if len(self.layers) < 1:
            raise InvalidInputError("feature field needs at least one layer")
        prev = None
        for layer in self.layers:
            if layer.ndim != 3:
                raise InvalidInputError("feature layers must be (C, h, w)")
            if prev is not None and (layer.shape[1] > prev[1] or layer.shape[2] > prev[2]):
                raise InvalidInputError("layer resolutions must be non-increasing")
            prev = layer.shape
        object.__setattr__(self, "layers", tuple(self.layers))


def _grid_values(grid: GridLike) -> np.ndarray:
    if isinstance(grid, ScalarGrid2D):
        return grid.values
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a 2-D grid, got shape {arr.shape}")
    return arr


def _clamp_points(xs: np.ndarray, ys: np.ndarray, h: int, w: int):
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise InvalidInputError("sample coordinates must be finite")
    return np.clip(xs, 0.0, w - 1.0), np.clip(ys, 0.0, h - 1.0)


def _corner_indices(xs: np.ndarray, ys: np.ndarray, h: int, w: int):
    """Integer corners and fractional offsets for clamped bilinear sampling."""
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.minimum(x0, w - 1)
    y0 = np.minimum(y0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return x0, x1, y0, y1, fx, fy


def sample_bilinear_many(grid: GridLike, xs, ys) -> np.ndarray:
    """Vectorized clamped bilinear sampling of a 2-D grid at float points."""
    values = _grid_values(grid)
    h, w = values.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xs, ys = _clamp_points(xs, ys, h, w)
    x0, x1, y0, y1, fx, fy = _corner_indices(xs, ys, h, w)
    v00 = values[y0, x0]
    v01 = values[y0, x1]
    v10 = values[y1, x0]
    v11 = values[y1, x1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def sample_bilinear(grid: GridLike, point) -> float:
    """Bilinear interpolation at a single (x, y) point, clamped to bounds.

    Integer coordinates return the cell value exactly.
    """
    x, y = point
    return float(sample_bilinear_many(grid, np.float64(x), np.float64(y)))


@dataclass(frozen=True)
class BilinearSample:
    """One sample with its partial derivatives.

    corner_indices holds four (y, x) pairs; corner_weights are the
    matching d(value)/d(cell) weights; grad_point is (d/dx, d/dy).
    """

    value: float
    corner_indices: tuple
    corner_weights: tuple
    grad_point: tuple


def sample_bilinear_full(grid: GridLike, point) -> BilinearSample:
    values = _grid_values(grid)
    h, w = values.shape
    x, y = point
    xs, ys = _clamp_points(np.float64(x), np.float64(y), h, w)
    x0, x1, y0, y1, fx, fy = _corner_indices(xs, ys, h, w)
    x0, x1, y0, y1 = int(x0), int(x1), int(y0), int(y1)
    fx, fy = float(fx), float(fy)
    v00, v01 = values[y0, x0], values[y0, x1]
    v10, v11 = values[y1, x0], values[y1, x1]
    value = (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy
    dvdx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    dvdy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
    return BilinearSample(
        value=float(value),
        corner_indices=((y0, x0), (y0, x1), (y1, x0), (y1, x1)),
        corner_weights=(
            (1 - fx) * (1 - fy),
            fx * (1 - fy),
            (1 - fx) * fy,
            fx * fy,
        ),
        grad_point=(float(dvdx), float(dvdy)),
    )


def sample_channels(field: np.ndarray, xs, ys) -> np.ndarray:
    """Sample every channel of a (C, H, W) field at N points -> (C, N)."""
    c, h, w = field.shape
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    xs, ys = _clamp_points(xs, ys, h, w)
    x0, x1, y0, y1, fx, fy = _corner_indices(xs, ys, h, w)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    return (
        field[:, y0, x0] * w00
        + field[:, y0, x1] * w01
        + field[:, y1, x0] * w10
        + field[:, y1, x1] * w11
    )


def scatter_channels(shape: tuple, xs, ys, grads: np.ndarray) -> np.ndarray:
    """Adjoint of sample_channels: accumulate (C, N) grads into (C, H, W)."""
    c, h, w = shape
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    xs, ys = _clamp_points(xs, ys, h, w)
    x0, x1, y0, y1, fx, fy = _corner_indices(xs, ys, h, w)
    out = np.zeros(shape, dtype=np.float64)
    for weights, yy, xx in (
        ((1 - fx) * (1 - fy), y0, x0),
        (fx * (1 - fy), y0, x1),
        ((1 - fx) * fy, y1, x0),
        (fx * fy, y1, x1),
    ):
        np.add.at(out, (slice(None), yy, xx), grads * weights)
    return out


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Gaussian kernel truncated at radius ceil(3*sigma), renormalized to sum 1."""
    if sigma < 0:
        raise InvalidInputError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array([1.0])
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(grid: GridLike, sigma: float) -> GridLike:
    """Separable Gaussian blur with edge replication at the borders.

    sigma == 0 is the identity.
    """
    values = _grid_values(grid)
    if sigma < 0:
        raise InvalidInputError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        out = values.copy()
    else:
        kernel = gaussian_kernel1d(sigma)
        out = convolve1d(values, kernel, axis=1, mode="nearest")
        out = convolve1d(out, kernel, axis=0, mode="nearest")
    if isinstance(grid, ScalarGrid2D):
        return ScalarGrid2D(out)
    return out


def normalize_max(grid: GridLike) -> GridLike:
    """Divide a grid by its maximum so the peak is exactly 1."""
    values = _grid_values(grid)
    peak = values.max()
    if peak <= 0:
        raise DegenerateMaskError("cannot normalize a grid without positive values")
    out = values / peak
    if isinstance(grid, ScalarGrid2D):
        return ScalarGrid2D(out)
    return out


def box_downsample(values: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling of (H, W) or (C, H, W) arrays."""
    if factor < 1:
        raise InvalidInputError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return values.copy()
    if values.ndim == 2:
        return box_downsample(values[None], factor)[0]
    c, h, w = values.shape
    if h % factor or w % factor:
        raise InvalidInputError(f"shape {(h, w)} not divisible by factor {factor}")
    return values.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def box_downsample_adjoint(grads: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of box_downsample: spread each value/factor^2 over its block."""
    if factor == 1:
        return grads.copy()
    spread = np.repeat(np.repeat(grads, factor, axis=-2), factor, axis=-1)
    return spread / float(factor * factor)


# Resizing avoids BLAS on purpose: gather-multiply-add ufunc chains give
# bit-identical results regardless of allocator or thread-pool state,
# which the determinism contract relies on.
_RESIZE_TABLE_CACHE: dict = {}


def _resize_tables(n_src: int, n_dst: int):
    """Cached (idx, weights) gather tables, each (n_dst, 2) and its
    fixed-width adjoint tables (n_src, K)."""
    key = (n_src, n_dst)
    if key not in _RESIZE_TABLE_CACHE:
        pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1.0)
        i0 = np.minimum(np.floor(pos).astype(np.intp), n_src - 1)
        i1 = np.minimum(i0 + 1, n_src - 1)
        w1 = pos - i0
        fwd_idx = np.stack([i0, i1], axis=1)
        fwd_w = np.stack([1.0 - w1, w1], axis=1)
        buckets = [[] for _ in range(n_src)]
        for dst in range(n_dst):
            for slot in range(2):
                weight = fwd_w[dst, slot]
                if weight != 0.0:
                    buckets[fwd_idx[dst, slot]].append((dst, weight))
        width = max(1, max(len(b) for b in buckets))
        adj_idx = np.zeros((n_src, width), dtype=np.intp)
        adj_w = np.zeros((n_src, width))
        for src, bucket in enumerate(buckets):
            for k, (dst, weight) in enumerate(bucket):
                adj_idx[src, k] = dst
                adj_w[src, k] = weight
        _RESIZE_TABLE_CACHE[key] = (fwd_idx, fwd_w, adj_idx, adj_w)
    return _RESIZE_TABLE_CACHE[key]


def _gather_axis_last(values: np.ndarray, idx: np.ndarray, weights: np.ndarray) -> np.ndarray:
    out = values[..., idx[:, 0]] * weights[:, 0]
    for k in range(1, idx.shape[1]):
        out += values[..., idx[:, k]] * weights[:, k]
    return out


def resize_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the trailing two axes of (..., H, W)."""
    h, w = values.shape[-2:]
    if (h, w) == (out_h, out_w):
        return values.copy()
    yi, yw, _, _ = _resize_tables(h, out_h)
    xi, xw, _, _ = _resize_tables(w, out_w)
    rows = _gather_axis_last(values.swapaxes(-1, -2), yi, yw).swapaxes(-1, -2)
    return _gather_axis_last(rows, xi, xw)


def resize_bilinear_adjoint(grads: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of resize_bilinear back to a (..., in_h, in_w) array."""
    out_h, out_w = grads.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return grads.copy()
    _, _, yi, yw = _resize_tables(in_h, out_h)
    _, _, xi, xw = _resize_tables(in_w, out_w)
    rows = _gather_axis_last(grads.swapaxes(-1, -2), yi, yw).swapaxes(-1, -2)
    return _gather_axis_last(rows, xi, xw)
