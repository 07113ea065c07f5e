import numpy as np
import pytest

from dragkit.errors import InvalidInputError, InvalidStepError
from dragkit.fields import LatentField, gaussian_kernel1d
from dragkit.toydiffusion import (
    NoiseSchedule,
    ToyDenoiser,
    cosine_schedule,
    ddim_step,
    denoise_to,
    extract_features,
    features_pullback,
    forward_noise,
    invert_to,
    predict_noise,
)


def circular_smooth_oracle(values, sigma):
    """Dense circular convolution via explicit rolls."""
    k = gaussian_kernel1d(sigma)
    r = (k.size - 1) // 2
    out = np.zeros_like(values, dtype=np.float64)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out += k[r + dy] * k[r + dx] * np.roll(values, (dy, dx), axis=(-2, -1))
    return out


@pytest.fixture(scope="module")
def schedule():
    return cosine_schedule(50)


@pytest.fixture(scope="module")
def denoiser():
    return ToyDenoiser(smoothing_sigma=0.4, pyramid_sigmas=(0.5, 1.0, 2.0))


class TestNoiseSchedule:
    def test_cosine_invariants(self, schedule):
        ab = schedule.alpha_bar
        assert ab[0] == 1.0
        assert np.all(np.diff(ab) < 0)
        assert ab[-1] > 0
        assert schedule.total_steps == 50

    def test_invalid_schedules_rejected(self):
        with pytest.raises(InvalidInputError):
            NoiseSchedule(np.array([0.9, 0.5]))  # must start at 1
        with pytest.raises(InvalidInputError):
            NoiseSchedule(np.array([1.0, 0.5, 0.5]))  # not strictly decreasing
        with pytest.raises(InvalidInputError):
            NoiseSchedule(np.array([1.0, 0.0]))  # must stay positive


class TestForwardNoise:
    def test_identity_at_schedule_start(self, schedule):
        rng = np.random.default_rng(0)
        z0 = LatentField(rng.standard_normal((2, 4, 4)), 0)
        eps = LatentField(rng.standard_normal((2, 4, 4)), 0)
        out = forward_noise(z0, 0, eps, schedule)
        assert np.allclose(out.values, z0.values, atol=1e-12)

    def test_zero_signal(self, schedule):
        rng = np.random.default_rng(1)
        eps = LatentField(rng.standard_normal((2, 4, 4)), 0)
        z0 = LatentField(np.zeros((2, 4, 4)), 0)
        out = forward_noise(z0, 7, eps, schedule)
        assert np.allclose(out.values, schedule.noise(7) * eps.values, atol=1e-12)

    def test_direct_arithmetic(self):
        schedule = NoiseSchedule(np.array([1.0, 0.25]))
        z0 = LatentField(np.full((1, 2, 2), 2.0), 0)
        eps = LatentField(np.full((1, 2, 2), 4.0), 0)
        out = forward_noise(z0, 1, eps, schedule)
        assert np.allclose(out.values, 1.0 + 4.0 * np.sqrt(0.75))

    def test_linearity(self, schedule):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((1, 4, 4))
        b = rng.standard_normal((1, 4, 4))
        eps = rng.standard_normal((1, 4, 4))
        combined = forward_noise(
            LatentField(2 * a + 3 * b, 0), 9, LatentField(eps, 0), schedule
        ).values
        separate = 2 * forward_noise(LatentField(a, 0), 9, LatentField(np.zeros_like(a), 0), schedule).values
        separate += 3 * forward_noise(LatentField(b, 0), 9, LatentField(np.zeros_like(b), 0), schedule).values
        separate += schedule.noise(9) * eps
        assert np.allclose(combined, separate, atol=1e-12)

    def test_shape_mismatch_rejected(self, schedule):
        with pytest.raises(InvalidInputError):
            forward_noise(
                LatentField(np.zeros((1, 4, 4)), 0), 3, LatentField(np.zeros((1, 2, 2)), 0), schedule
            )


class TestPredictNoise:
    def test_constant_field_closed_form(self, schedule, denoiser):
        z = LatentField(np.full((2, 8, 8), 1.7), 10)
        out = predict_noise(z, 10, denoiser, schedule)
        expected = 1.7 * (1 - schedule.signal(10)) / schedule.noise(10)
        assert np.allclose(out.values, expected, atol=1e-10)

    def test_identity_smoothing_closed_form(self, schedule):
        den = ToyDenoiser(smoothing_sigma=0.0, pyramid_sigmas=(0.5,))
        rng = np.random.default_rng(3)
        z = LatentField(rng.standard_normal((1, 8, 8)), 12)
        out = predict_noise(z, 12, den, schedule)
        expected = z.values * (1 - schedule.signal(12)) / schedule.noise(12)
        assert np.allclose(out.values, expected, atol=1e-12)

    def test_formula_oracle(self, schedule, denoiser):
        rng = np.random.default_rng(4)
        z = LatentField(rng.standard_normal((3, 8, 8)), 20)
        out = predict_noise(z, 20, denoiser, schedule)
        smoothed = circular_smooth_oracle(z.values, denoiser.smoothing_sigma)
        expected = (z.values - schedule.signal(20) * smoothed) / schedule.noise(20)
        assert np.max(np.abs(out.values - expected)) < 1e-12

    def test_step_zero_rejected(self, schedule, denoiser):
        with pytest.raises(InvalidStepError):
            predict_noise(LatentField(np.zeros((1, 4, 4)), 0), 0, denoiser, schedule)


class TestDdimStep:
    def test_one_step_mutual_inverse(self, schedule, denoiser):
        rng = np.random.default_rng(5)
        for t in (1, 7, 25, 50):
            z = LatentField(rng.standard_normal((2, 8, 8)), t - 1)
            fwd = ddim_step(z, t, "forward", denoiser, schedule)
            back = ddim_step(fwd, t, "backward", denoiser, schedule)
            assert np.max(np.abs(back.values - z.values)) < 1e-6

    def test_backward_matches_literal_update(self, schedule, denoiser):
        rng = np.random.default_rng(6)
        t = 13
        z = LatentField(rng.standard_normal((2, 8, 8)), t)
        eps = predict_noise(z, t, denoiser, schedule).values
        z0_hat = (z.values - schedule.noise(t) * eps) / schedule.signal(t)
        expected = schedule.signal(t - 1) * z0_hat + schedule.noise(t - 1) * eps
        out = ddim_step(z, t, "backward", denoiser, schedule)
        assert np.allclose(out.values, expected, atol=1e-12)
        assert out.timestep == t - 1

    def test_full_round_trip(self, schedule, denoiser):
        rng = np.random.default_rng(7)
        z0 = LatentField(rng.standard_normal((4, 16, 16)), 0)
        zt = invert_to(z0, 50, denoiser, schedule)
        rec = denoise_to(zt, 0, denoiser, schedule)
        assert np.mean(np.abs(rec.values - z0.values)) <= 1e-4

    def test_constant_trajectory_closed_form(self, schedule, denoiser):
        z0 = LatentField(np.full((1, 8, 8), 2.0), 0)
        zt = invert_to(z0, 5, denoiser, schedule)
        # constants see the DC multiplier of each step, which is
        # a_{t-1} + (b_{t-1}/b_t)(1 - a_t) because the kernel sums to 1
        value = 2.0
        for t in range(1, 6):
            m = schedule.signal(t - 1) + (schedule.noise(t - 1) / schedule.noise(t)) * (
                1 - schedule.signal(t)
            )
            value /= m
        assert np.allclose(zt.values, value, atol=1e-9)
        assert np.ptp(zt.values) < 1e-12  # stays constant per channel

    def test_step_bounds(self, schedule, denoiser):
        z = LatentField(np.zeros((1, 4, 4)), 0)
        with pytest.raises(InvalidStepError):
            ddim_step(z, 0, "backward", denoiser, schedule)
        with pytest.raises(InvalidStepError):
            ddim_step(z, 51, "forward", denoiser, schedule)
        with pytest.raises(InvalidInputError):
            ddim_step(z, 1, "sideways", denoiser, schedule)


class TestExtractFeatures:
    def test_identity_configuration(self):
        den = ToyDenoiser(smoothing_sigma=0.4, pyramid_sigmas=(0.0,))
        rng = np.random.default_rng(8)
        z = LatentField(rng.standard_normal((4, 8, 8)), 4)
        feats = extract_features(z, den)
        assert len(feats.layers) == 1
        assert np.array_equal(feats.layers[0], z.values)

    def test_shift_equivariance(self, denoiser):
        rng = np.random.default_rng(9)
        z = rng.standard_normal((4, 16, 16))
        shift = 4  # divisible by every pyramid factor
        feats = extract_features(LatentField(z, 6), denoiser)
        shifted = extract_features(LatentField(np.roll(z, shift, axis=2), 6), denoiser)
        for level, (a, b) in enumerate(zip(feats.layers, shifted.layers)):
            factor = 2**level
            assert np.max(np.abs(np.roll(a, shift // factor, axis=2) - b)) < 1e-6

    def test_linearity(self, denoiser):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((4, 8, 8))
        y = rng.standard_normal((4, 8, 8))
        fx = extract_features(LatentField(x, 3), denoiser)
        fy = extract_features(LatentField(y, 3), denoiser)
        fxy = extract_features(LatentField(2 * x + 3 * y, 3), denoiser)
        for a, b, c in zip(fx.layers, fy.layers, fxy.layers):
            assert np.max(np.abs(2 * a + 3 * b - c)) < 1e-9

    def test_pullback_is_adjoint(self, denoiser):
        rng = np.random.default_rng(11)
        z = rng.standard_normal((4, 8, 8))
        feats = extract_features(LatentField(z, 3), denoiser)
        grads = [rng.standard_normal(l.shape) for l in feats.layers]
        lhs = sum(float(np.sum(l * g)) for l, g in zip(feats.layers, grads))
        pulled = features_pullback(grads, z.shape, denoiser)
        rhs = float(np.sum(z * pulled))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_gradient_matches_finite_differences(self, denoiser):
        rng = np.random.default_rng(12)
        z = rng.standard_normal((2, 8, 8))
        weights = [rng.standard_normal(l.shape) for l in
                   extract_features(LatentField(z, 3), denoiser).layers]

        def functional(values):
            feats = extract_features(LatentField(values, 3), denoiser)
            return sum(float(np.sum(w * l)) for w, l in zip(weights, feats.layers))

        grad = features_pullback(weights, z.shape, denoiser)
        step = 1e-5
        for _ in range(20):
            idx = (rng.integers(0, 2), rng.integers(0, 8), rng.integers(0, 8))
            zp, zm = z.copy(), z.copy()
            zp[idx] += step
            zm[idx] -= step
            fd = (functional(zp) - functional(zm)) / (2 * step)
            assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_denoiser_validation(self):
        with pytest.raises(Exception):
            ToyDenoiser(smoothing_sigma=-1.0)
        with pytest.raises(Exception):
            ToyDenoiser(pyramid_sigmas=(2.0, 1.0))
        with pytest.raises(Exception):
            ToyDenoiser(pyramid_sigmas=())
