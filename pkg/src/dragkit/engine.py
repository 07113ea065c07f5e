"""Drag optimization core: patch losses over denoiser features, masked
latent updates, the alternating drag/denoise schedule, and feature-matching
point tracking, orchestrated into one full edit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DivergedOptimizationError,
    InvalidInputError,
)
from .fields import LatentField, box_downsample, resize_bilinear, sample_channels, scatter_channels
from .latentwarp import LwfParams, compute_displacement_field, warp_latent
from .readout import ReadoutHead, readout_forward, rg_loss
from .softmask import PointPair, SoftMask, generate_soft_mask, pairs_at_scale
from .toydiffusion import (
    LATENT_FACTOR,
    NoiseSchedule,
    ToyDenoiser,
    denoise_to,
    extract_features,
    features_pullback,
    invert_to,
)

FREEZE_DISTANCE = 1.0  # latent cells; strictly inside freezes a pair


@dataclass(frozen=True)
class DragConfig:
    """Knobs of one drag edit. Radii and the freeze rule live in cells of
    the chosen feature layer (layer 0 == latent cells)."""

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

    def __post_init__(self) -> None:
        if self.drag_steps_per_denoise < 1:
            raise InvalidInputError("drag_steps_per_denoise must be >= 1")
        if self.patch_radius < 1 or self.tracking_radius < 1:
            raise InvalidInputError("patch and tracking radii must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be > 0")
        if self.max_drag_iterations < 0:
            raise InvalidInputError("max_drag_iterations must be >= 0")
        if self.rg_weight < 0:
            raise InvalidInputError("rg_weight must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidInputError("rho must be in [0, 1]")
        if self.mask_sigma < 0:
            raise InvalidInputError("mask_sigma must be >= 0")
        if self.feature_layer < 0:
            raise InvalidInputError("feature_layer must be >= 0")


@dataclass
class TrackState:
    """Tracked handle positions (latent coordinates) plus the reference
    patch features captured at session start."""

    pairs: list
    initial_handles: np.ndarray  # (n, 2) float latent (x, y)
    current_handles: np.ndarray  # (n, 2) float latent (x, y)
    targets: np.ndarray  # (n, 2) float latent (x, y)
    reference_patches: list  # n arrays of shape (C, P)
    frozen: np.ndarray  # (n,) bool, sticky

    @property
    def count(self) -> int:
        return len(self.pairs)

    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.targets - self.current_handles, axis=1)

    def refresh_frozen(self) -> None:
        self.frozen |= self.distances() < FREEZE_DISTANCE


@dataclass
class EditSession:
    """Single-writer state of one drag optimization."""

    original_latent: LatentField  # frozen post-warp reference
    current_latent: LatentField
    mask_latent: np.ndarray  # (h, w) soft mask at latent resolution
    track: TrackState
    reference_embeddings: dict  # timestep -> embedding of the original latent
    config: DragConfig
    iteration: int = 0

    def __post_init__(self) -> None:
        self.original_latent.values.flags.writeable = False
        if self.mask_latent.shape != self.original_latent.values.shape[1:]:
            raise InvalidInputError("mask and latent resolutions must agree")

    @property
    def reference_embedding(self) -> np.ndarray:
        """Reference for the session's current timestep."""
        return self.reference_embeddings[self.current_latent.timestep]


def _patch_points(center: np.ndarray, radius: int):
    """Integer-offset patch grid around a (possibly fractional) center."""
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    dx, dy = np.meshgrid(offs, offs)
    return center[0] + dx.ravel(), center[1] + dy.ravel()


def _layer_and_factor(session: EditSession, features) -> tuple:
    idx = session.config.feature_layer
    if idx >= len(features.layers):
        raise ConfigurationError(
            f"feature_layer {idx} out of range for {len(features.layers)} layers"
        )
    layer = features.layers[idx]
    factor = session.current_latent.height // layer.shape[1]
    return idx, layer, float(factor)


def motion_supervision_loss(
    session: EditSession, features, reference_features=None
) -> tuple:
    """Incremental step loss: features one unit step ahead of each tracked
    handle are pulled toward stop-gradient features at the handle patch.

    The stop-gradient reference is sampled from reference_features (a
    frozen copy; defaults to the same features, so the values match and
    only the gradient is blocked). Returns (loss, layer_index, layer_grad).
    """
    idx, layer, factor = _layer_and_factor(session, features)
    ref_layer = layer if reference_features is None else reference_features.layers[idx]
    r = session.config.patch_radius
    loss = 0.0
    layer_grad = np.zeros_like(layer)
    for i in range(session.track.count):
        if session.track.frozen[i]:
            continue
        cur = session.track.current_handles[i] / factor
        tgt = session.track.targets[i] / factor
        delta = tgt - cur
        dist = float(np.hypot(delta[0], delta[1]))
        if dist == 0.0:
            continue
        step = delta / dist * min(1.0, dist)
        qx, qy = _patch_points(cur, r)
        moving = sample_channels(layer, qx + step[0], qy + step[1])
        ref = sample_channels(ref_layer, qx, qy)  # stop-gradient values
        diff = moving - ref
        loss += float(np.abs(diff).sum())
        layer_grad += scatter_channels(layer.shape, qx + step[0], qy + step[1], np.sign(diff))
    return loss, idx, layer_grad


def drag_loss(session: EditSession, features, reference_features=None) -> tuple:
    """Patch alignment between each target location and the stop-gradient
    patch at the initial handle, both on the current features."""
    idx, layer, factor = _layer_and_factor(session, features)
    ref_layer = layer if reference_features is None else reference_features.layers[idx]
    r = session.config.patch_radius
    loss = 0.0
    layer_grad = np.zeros_like(layer)
    for i in range(session.track.count):
        if session.track.frozen[i]:
            continue
        init = session.track.initial_handles[i] / factor
        tgt = session.track.targets[i] / factor
        if np.array_equal(init, tgt):
            continue
        sx, sy = _patch_points(init, r)
        dx, dy = _patch_points(tgt, r)
        displaced = sample_channels(layer, dx, dy)
        source = sample_channels(ref_layer, sx, sy)  # stop-gradient values
        diff = displaced - source
        loss += float(np.abs(diff).sum())
        layer_grad += scatter_channels(layer.shape, dx, dy, np.sign(diff))
    return loss, idx, layer_grad


def apply_masked_update(
    session: EditSession, total_gradient: np.ndarray, learning_rate: float
) -> LatentField:
    """z <- z - lr * M (.) grad, broadcasting the mask over channels.

    Cells where the mask is exactly 0 are bit-identical afterward. A
    non-finite gradient raises without touching the session.
    """
    if total_gradient.shape != session.current_latent.values.shape:
        raise InvalidInputError("gradient must be latent-shaped")
    if not np.all(np.isfinite(total_gradient)):
        raise DivergedOptimizationError("non-finite drag gradient")
    updated = session.current_latent.values - learning_rate * (
        session.mask_latent[None, :, :] * total_gradient
    )
    session.current_latent = session.current_latent.with_values(updated)
    return session.current_latent


def track_points(session: EditSession, features) -> TrackState:
    """Move each unfrozen handle to the integer-displacement argmin of the
    patch-L1 distance to its stored reference patch. Ties prefer the
    smallest displacement, then lexicographic (dy, dx)."""
    idx, layer, factor = _layer_and_factor(session, features)
    r1 = session.config.patch_radius
    r2 = session.config.tracking_radius
    h_layer, w_layer = layer.shape[1:]
    offs = np.arange(-r2, r2 + 1, dtype=np.float64)
    ddx, ddy = np.meshgrid(offs, offs)
    ddx, ddy = ddx.ravel(), ddy.ravel()
    for i in range(session.track.count):
        if session.track.frozen[i]:
            continue
        center = session.track.current_handles[i] / factor
        cand_x = np.clip(center[0] + ddx, 0, w_layer - 1)
        cand_y = np.clip(center[1] + ddy, 0, h_layer - 1)
        px, py = _patch_points(np.zeros(2), r1)
        all_x = cand_x[:, None] + px[None, :]
        all_y = cand_y[:, None] + py[None, :]
        vals = sample_channels(layer, all_x.ravel(), all_y.ravel())
        vals = vals.reshape(layer.shape[0], cand_x.size, px.size)
        ref = session.track.reference_patches[i][:, None, :]
        dists = np.abs(vals - ref).sum(axis=(0, 2))
        order = np.lexsort((ddx, ddy, ddx * ddx + ddy * ddy, dists))
        best = order[0]
        session.track.current_handles[i] = np.array(
            [cand_x[best] * factor, cand_y[best] * factor]
        )
    session.track.refresh_frozen()
    return session.track


def alternating_schedule(total_denoise_steps: int, drag_steps: int) -> list:
    """(B x drag, 1 x denoise) repeated for the requested denoise count."""
    if drag_steps < 1:
        raise InvalidInputError("drag_steps must be >= 1")
    if total_denoise_steps < 0:
        raise InvalidInputError("total_denoise_steps must be >= 0")
    actions = []
    for _ in range(total_denoise_steps):
        actions.extend(["drag"] * drag_steps)
        actions.append("denoise")
    return actions


def mean_distance(final_handles: Sequence, targets: Sequence) -> float:
    """Mean Euclidean distance in image pixels."""
    if len(final_handles) == 0 or len(final_handles) != len(targets):
        raise InvalidInputError("handles and targets must be non-empty, equal length")
    total = 0.0
    for (hx, hy), (tx, ty) in zip(final_handles, targets):
        total += math.hypot(hx - tx, hy - ty)
    return total / len(final_handles)


def encode_image(image: np.ndarray) -> LatentField:
    """Toy encoder: box-mean downsample RGB by the latent factor, plus a
    luminance channel."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if h % LATENT_FACTOR or w % LATENT_FACTOR:
        raise InvalidInputError(
            f"image {w}x{h} not divisible by the latent factor {LATENT_FACTOR}"
        )
    rgb = np.moveaxis(image.astype(np.float64), -1, 0)
    lum = rgb.mean(axis=0, keepdims=True)
    return LatentField(box_downsample(np.concatenate([rgb, lum]), LATENT_FACTOR), 0)


def decode_latent(latent: LatentField, out_shape: tuple) -> np.ndarray:
    """Toy decoder: bilinear upsample of the RGB channels, clipped to [0, 1]."""
    h, w = out_shape
    rgb = resize_bilinear(latent.values[:3], h, w)
    return np.clip(np.moveaxis(rgb, 0, -1), 0.0, 1.0)


@dataclass
class EditReport:
    """Structured record of one run."""

    final_handles: list  # image-pixel (x, y) per pair
    targets: list
    mean_distance: float
    converged: bool
    iterations: list = field(default_factory=list)  # per drag step dicts
    handle_trajectory: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "final_handles": [list(map(float, h)) for h in self.final_handles],
            "targets": [list(map(float, t)) for t in self.targets],
            "mean_distance": self.mean_distance,
            "converged": self.converged,
            "iterations": self.iterations,
            "handle_trajectory": self.handle_trajectory,
        }


@dataclass
class EditResult:
    image: np.ndarray
    report: EditReport
    mask_image: SoftMask
    mask_latent: SoftMask
    displacement: object
    latent_before_final_denoise: Optional[LatentField] = None


def _total_gradient(session: EditSession, head: ReadoutHead, denoiser: ToyDenoiser):
    features = extract_features(session.current_latent, denoiser)
    l_drag, idx_d, g_drag = drag_loss(session, features)
    l_ms, idx_m, g_ms = motion_supervision_loss(session, features)
    layer_grads = [None] * len(features.layers)
    layer_grads[idx_d] = g_drag
    if session.config.use_motion_supervision:
        if layer_grads[idx_m] is None:
            layer_grads[idx_m] = g_ms
        else:
            layer_grads[idx_m] = layer_grads[idx_m] + g_ms
    grad = features_pullback(layer_grads, session.current_latent.values.shape, denoiser)
    if session.config.rg_weight > 0:
        l_rg, g_rg = rg_loss(
            session.current_latent, session.reference_embedding, head, denoiser
        )
        grad = grad + session.config.rg_weight * g_rg
    else:
        l_rg, _ = rg_loss(
            session.current_latent, session.reference_embedding, head, denoiser
        )
    losses = {
        "drag": l_drag,
        "motion": l_ms,
        "readout": l_rg,
        "total": l_drag
        + (l_ms if session.config.use_motion_supervision else 0.0)
        + session.config.rg_weight * l_rg,
    }
    return grad, losses


def start_session(
    image: np.ndarray,
    pairs: Sequence[PointPair],
    config: DragConfig,
    head: ReadoutHead,
    denoiser: ToyDenoiser,
    schedule: NoiseSchedule,
):
    """Encode, invert, build masks, warp, and capture references."""
    if len(pairs) == 0:
        raise InvalidInputError("at least one point pair is required")
    h_img, w_img = image.shape[:2]
    for pair in pairs:
        for point in (pair.handle, pair.target):
            if not (0 <= point[0] < w_img and 0 <= point[1] < h_img):
                raise InvalidInputError(f"point {point} outside {w_img}x{h_img} image")

    z0 = encode_image(image)
    t0 = config.latent_timestep
    if t0 is None:
        t0 = math.ceil(0.7 * schedule.total_steps)
    if not 1 <= t0 <= schedule.total_steps:
        raise InvalidInputError(f"latent_timestep {t0} outside [1, {schedule.total_steps}]")

    z_t = invert_to(z0, t0, denoiser, schedule)

    h_lat, w_lat = z0.height, z0.width
    scale = 1.0 / LATENT_FACTOR
    mask_image = generate_soft_mask(pairs, (h_img, w_img), config.mask_sigma)
    latent_pairs = pairs_at_scale(pairs, scale, (h_lat, w_lat))
    mask_latent = generate_soft_mask(
        latent_pairs, (h_lat, w_lat), config.mask_sigma * scale
    )
    field_latent = compute_displacement_field(
        mask_latent, latent_pairs, LwfParams(rho=config.rho)
    )
    z_warp = warp_latent(z_t, field_latent)

    # embeddings of the original latent's own denoise trajectory, one per
    # timestep the alternating loop will visit
    groups = config.max_drag_iterations // config.drag_steps_per_denoise
    if t0 - groups < 0:
        raise InvalidInputError(
            f"{groups} interleaved denoise steps exceed latent timestep {t0}"
        )
    features0 = extract_features(z_warp, denoiser)
    reference_embeddings = {t0: readout_forward(features0, t0, head)}
    z_ref = z_warp
    for t in range(t0 - 1, t0 - groups - 1, -1):
        z_ref = denoise_to(z_ref, t, denoiser, schedule)
        reference_embeddings[t] = readout_forward(
            extract_features(z_ref, denoiser), t, head
        )
    layer = features0.layers[config.feature_layer]
    factor = float(h_lat // layer.shape[1])

    initial = np.array([[p.handle[0] * scale, p.handle[1] * scale] for p in pairs])
    targets = np.array([[p.target[0] * scale, p.target[1] * scale] for p in pairs])
    reference_patches = []
    for pos in initial:
        qx, qy = _patch_points(pos / factor, config.patch_radius)
        reference_patches.append(sample_channels(layer, qx, qy))

    track = TrackState(
        pairs=list(pairs),
        initial_handles=initial.copy(),
        current_handles=initial.copy(),
        targets=targets,
        reference_patches=reference_patches,
        frozen=np.zeros(len(pairs), dtype=bool),
    )
    track.refresh_frozen()
    session = EditSession(
        original_latent=z_warp,
        current_latent=z_warp.with_values(z_warp.values.copy()),
        mask_latent=mask_latent.values,
        track=track,
        reference_embeddings=reference_embeddings,
        config=config,
    )
    return session, mask_image, mask_latent, field_latent


def run_drag_edit(
    image: np.ndarray,
    pairs: Sequence[PointPair],
    config: DragConfig,
    head: ReadoutHead,
    denoiser: ToyDenoiser,
    schedule: NoiseSchedule,
    keep_internals: bool = False,
) -> EditResult:
    """Full pipeline: encode -> invert -> mask -> warp -> alternating
    drag/denoise optimization with tracking -> denoise -> decode."""
    session, mask_image, mask_latent, field_latent = start_session(
        image, pairs, config, head, denoiser, schedule
    )
    cfg = config
    groups = cfg.max_drag_iterations // cfg.drag_steps_per_denoise
    if session.current_latent.timestep - groups < 0:
        raise InvalidInputError(
            f"{groups} interleaved denoise steps exceed timestep {session.current_latent.timestep}"
        )
    actions = alternating_schedule(groups, cfg.drag_steps_per_denoise)

    report = EditReport(
        final_handles=[],
        targets=[list(p.target) for p in pairs],
        mean_distance=float("nan"),
        converged=False,
    )
    report.handle_trajectory.append(
        (session.track.current_handles * LATENT_FACTOR).tolist()
    )

    for action in actions:
        if action == "drag":
            grad, losses = _total_gradient(session, head, denoiser)
            apply_masked_update(session, grad, cfg.learning_rate)
            features = extract_features(session.current_latent, denoiser)
            track_points(session, features)
            session.iteration += 1
            report.iterations.append({"step": session.iteration, **losses})
            report.handle_trajectory.append(
                (session.track.current_handles * LATENT_FACTOR).tolist()
            )
        else:
            t = session.current_latent.timestep
            session.current_latent = denoise_to(
                session.current_latent, t - 1, denoiser, schedule
            )

    latent_before_final = session.current_latent
    final = denoise_to(session.current_latent, 0, denoiser, schedule)
    out_image = decode_latent(final, image.shape[:2])

    final_handles = (session.track.current_handles * LATENT_FACTOR).tolist()
    report.final_handles = final_handles
    report.mean_distance = mean_distance(final_handles, report.targets)
    report.converged = bool(session.track.frozen.all())
    return EditResult(
        image=out_image,
        report=report,
        mask_image=mask_image,
        mask_latent=mask_latent,
        displacement=field_latent,
        latent_before_final_denoise=latent_before_final if keep_internals else None,
    )
