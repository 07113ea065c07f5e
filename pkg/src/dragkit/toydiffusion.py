"""Deterministic, analytically differentiable diffusion stand-in.

The denoiser is linear: its clean-image prediction is a fixed Gaussian
smoothing S of the current latent, applied as a circular convolution so
each deterministic denoise step is a diagonal operator in Fourier space.
Inversion steps divide by the same per-mode multipliers, which makes
forward/backward steps exact mutual inverses instead of the usual
first-order approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError, InvalidStepError
from .fields import (
    FeatureField,
    LatentField,
    box_downsample,
    box_downsample_adjoint,
    gaussian_kernel1d,
)

LATENT_CHANNELS = 4
LATENT_FACTOR = 8


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels alpha_bar[0..T] with alpha_bar[0] = 1."""

    alpha_bar: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.alpha_bar, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise InvalidInputError("alpha_bar must be a 1-D array of length T+1")
        if arr[0] != 1.0:
            raise InvalidInputError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(arr) >= 0):
            raise InvalidInputError("alpha_bar must be strictly decreasing")
        if arr[-1] <= 0 or np.any(arr > 1):
            raise InvalidInputError("alpha_bar must stay in (0, 1]")
        object.__setattr__(self, "alpha_bar", arr)

    @property
    def total_steps(self) -> int:
        return self.alpha_bar.size - 1

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar_t)."""
        return float(np.sqrt(self.alpha_bar[t]))

    def noise(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t)."""
        return float(np.sqrt(1.0 - self.alpha_bar[t]))


def cosine_schedule(total_steps: int = 50) -> NoiseSchedule:
    """alpha_bar_t = cos(pi/2 * t/(T+1))^2: starts at 1, ends above 0."""
    if total_steps < 1:
        raise InvalidInputError("total_steps must be >= 1")
    t = np.arange(total_steps + 1, dtype=np.float64)
    alpha_bar = np.cos(0.5 * np.pi * t / (total_steps + 1)) ** 2
    alpha_bar[0] = 1.0
    return NoiseSchedule(alpha_bar)


def _axis_transfer(sigma: float, n: int) -> np.ndarray:
    """Real full-length Fourier multipliers of a circular 1-D Gaussian blur.

    Kernels wider than the axis wrap around, exactly like the dense
    circular convolution they stand for.
    """
    kernel = gaussian_kernel1d(sigma)
    radius = (kernel.size - 1) // 2
    freqs = np.arange(n, dtype=np.float64) * (2.0 * np.pi / n)
    transfer = np.full(freqs.shape, kernel[radius])
    for m in range(1, radius + 1):
        transfer += 2.0 * kernel[radius + m] * np.cos(m * freqs)
    return transfer


class ToyDenoiser:
    """Linear stand-in for the frozen denoiser backbone.

    smoothing_sigma drives the clean-image prediction S; pyramid_sigmas
    and pyramid_levels define the multi-scale feature stack (level l is
    smoothed at pyramid_sigmas[l] and downsampled by 2**l).
    """

    def __init__(self, smoothing_sigma: float = 0.4, pyramid_sigmas=(0.5, 1.0, 2.0)):
        if smoothing_sigma < 0:
            raise ConfigurationError("smoothing_sigma must be >= 0")
        sigmas = tuple(float(s) for s in pyramid_sigmas)
        if len(sigmas) < 1:
            raise ConfigurationError("at least one pyramid level is required")
        if any(s < 0 for s in sigmas):
            raise ConfigurationError("pyramid sigmas must be >= 0")
        if any(b < a for a, b in zip(sigmas, sigmas[1:])):
            raise ConfigurationError("pyramid sigmas must be non-decreasing")
        self.smoothing_sigma = float(smoothing_sigma)
        self.pyramid_sigmas = sigmas
        self.pyramid_levels = len(sigmas)
        self._transfer_cache: dict = {}

    def _transfer(self, sigma: float, shape: tuple) -> tuple:
        key = (sigma, shape)
        if key not in self._transfer_cache:
            h, w = shape
            ty = _axis_transfer(sigma, h)
            tx = _axis_transfer(sigma, w)[: w // 2 + 1]  # rFFT keeps half of x
            self._transfer_cache[key] = (ty[:, None], tx[None, :])
        return self._transfer_cache[key]

    def smooth(self, values: np.ndarray, sigma: float) -> np.ndarray:
        """Circular separable Gaussian smoothing of (..., H, W)."""
        if sigma == 0:
            return values.copy()
        h, w = values.shape[-2:]
        ty, tx = self._transfer(sigma, (h, w))
        spec = np.fft.rfft2(values, axes=(-2, -1))
        return np.fft.irfft2(spec * ty * tx, s=(h, w), axes=(-2, -1))

    def step_multipliers(self, t: int, schedule: NoiseSchedule, shape: tuple) -> np.ndarray:
        """Per-mode multipliers of the denoise step t -> t-1."""
        a_prev, a_cur = schedule.signal(t - 1), schedule.signal(t)
        b_prev, b_cur = schedule.noise(t - 1), schedule.noise(t)
        h, w = shape
        if self.smoothing_sigma == 0:
            transfer = np.ones((h, w // 2 + 1))
        else:
            ty, tx = self._transfer(self.smoothing_sigma, (h, w))
            transfer = ty * tx
        return a_prev * transfer + (b_prev / b_cur) * (1.0 - a_cur * transfer)

    def validate_invertible(self, schedule: NoiseSchedule, shape: tuple) -> None:
        """Reject configurations whose inversion steps are ill-conditioned."""
        for t in range(1, schedule.total_steps + 1):
            m = self.step_multipliers(t, schedule, shape)
            if np.min(np.abs(m)) < 1e-6:
                raise ConfigurationError(
                    f"denoise step {t} is numerically singular on shape {shape}"
                )


def forward_noise(
    z0: LatentField, t: int, eps: LatentField, schedule: NoiseSchedule
) -> LatentField:
    """z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps."""
    if eps.values.shape != z0.values.shape:
        raise InvalidInputError("eps must match z0's shape")
    if not 0 <= t <= schedule.total_steps:
        raise InvalidStepError(f"t={t} outside schedule [0, {schedule.total_steps}]")
    values = schedule.signal(t) * z0.values + schedule.noise(t) * eps.values
    return LatentField(values, t)


def predict_noise(
    zt: LatentField, t: int, denoiser: ToyDenoiser, schedule: NoiseSchedule
) -> LatentField:
    """eps_hat = (z_t - sqrt(alpha_bar_t) * S(z_t)) / sqrt(1 - alpha_bar_t)."""
    if t < 1 or t > schedule.total_steps:
        raise InvalidStepError(f"noise prediction needs 1 <= t <= T, got {t}")
    smoothed = denoiser.smooth(zt.values, denoiser.smoothing_sigma)
    values = (zt.values - schedule.signal(t) * smoothed) / schedule.noise(t)
    return LatentField(values, t)


def ddim_step(
    zt: LatentField,
    t: int,
    direction: str,
    denoiser: ToyDenoiser,
    schedule: NoiseSchedule,
) -> LatentField:
    """One deterministic sampler step.

    backward: denoise t -> t-1 via the literal update built on
    predict_noise. forward: invert t-1 -> t by dividing the latent's
    spectrum by the same step's per-mode multipliers, the exact inverse
    of the backward step.
    """
    if direction not in ("forward", "backward"):
        raise InvalidInputError(f"unknown direction {direction!r}")
    if t < 1 or t > schedule.total_steps:
        raise InvalidStepError(f"step index t={t} outside [1, {schedule.total_steps}]")
    h, w = zt.values.shape[-2:]
    if direction == "backward":
        if zt.timestep != t:
            raise InvalidStepError(f"latent at t={zt.timestep}, expected {t}")
        eps = predict_noise(zt, t, denoiser, schedule).values
        z0_hat = (zt.values - schedule.noise(t) * eps) / schedule.signal(t)
        values = schedule.signal(t - 1) * z0_hat + schedule.noise(t - 1) * eps
        return LatentField(values, t - 1)
    if zt.timestep != t - 1:
        raise InvalidStepError(f"latent at t={zt.timestep}, expected {t - 1}")
    multipliers = denoiser.step_multipliers(t, schedule, (h, w))
    spec = np.fft.rfft2(zt.values, axes=(-2, -1))
    values = np.fft.irfft2(spec / multipliers, s=(h, w), axes=(-2, -1))
    return LatentField(values, t)


def invert_to(
    z: LatentField, t: int, denoiser: ToyDenoiser, schedule: NoiseSchedule
) -> LatentField:
    """Run forward inversion steps from z.timestep up to t."""
    if t < z.timestep or t > schedule.total_steps:
        raise InvalidStepError(f"cannot invert from {z.timestep} to {t}")
    out = z
    for step in range(z.timestep + 1, t + 1):
        out = ddim_step(out, step, "forward", denoiser, schedule)
    return out


def denoise_to(
    z: LatentField, t: int, denoiser: ToyDenoiser, schedule: NoiseSchedule
) -> LatentField:
    """Run backward denoise steps from z.timestep down to t."""
    if t > z.timestep or t < 0:
        raise InvalidStepError(f"cannot denoise from {z.timestep} to {t}")
    out = z
    for step in range(z.timestep, t, -1):
        out = ddim_step(out, step, "backward", denoiser, schedule)
    return out


def extract_features(zt: LatentField, denoiser: ToyDenoiser) -> FeatureField:
    """Multi-scale features: level l = smooth(z, sigma_l) pooled by 2**l.

    Every layer is linear in the latent; features_pullback is the exact
    adjoint of this map.
    """
    layers = []
    for level, sigma in enumerate(denoiser.pyramid_sigmas):
        factor = 2 ** level
        h, w = zt.values.shape[-2:]
        if h % factor or w % factor:
            raise ConfigurationError(
                f"latent {h}x{w} not divisible by pyramid factor {factor}"
            )
        smoothed = denoiser.smooth(zt.values, sigma)
        layers.append(box_downsample(smoothed, factor))
    return FeatureField(
        layers=tuple(layers),
        provenance_shape=zt.values.shape,
        timestep=zt.timestep,
    )


def features_pullback(
    layer_grads, provenance_shape: tuple, denoiser: ToyDenoiser
) -> np.ndarray:
    """Map per-layer feature gradients back to a latent-shaped gradient.

    layer_grads may contain None for layers that received no gradient.
    """
    out = np.zeros(provenance_shape, dtype=np.float64)
    for level, grad in enumerate(layer_grads):
        if grad is None:
            continue
        factor = 2 ** level
        spread = box_downsample_adjoint(np.asarray(grad, dtype=np.float64), factor)
        # circular convolution with a symmetric kernel is self-adjoint
        out += denoiser.smooth(spread, denoiser.pyramid_sigmas[level])
    return out
