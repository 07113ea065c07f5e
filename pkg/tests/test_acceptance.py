"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line with its runtime. Tolerances are pinned here and nowhere
else."""

import hashlib
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from dragkit.bench import (
    blob_drag_config,
    blob_pairs,
    blob_scene,
    outside_mask_mae,
    write_blob_scene,
)
from dragkit.cli import main as cli_main
from dragkit.config import EngineConfig, build_engine
from dragkit.engine import (
    _patch_points,
    decode_latent,
    drag_loss,
    encode_image,
    motion_supervision_loss,
    run_drag_edit,
    start_session,
    track_points,
)
from dragkit.fields import (
    LatentField,
    gaussian_blur,
    sample_bilinear,
    sample_bilinear_full,
    sample_channels,
)
from dragkit.latentwarp import (
    DisplacementField,
    LwfParams,
    compute_displacement_field,
    inverse_distance_weights,
    stretch_factor,
    warp_latent,
)
from dragkit.readout import (
    ReadoutHead,
    mean_triplet_loss,
    rg_loss,
    synthetic_triplets,
    train_readout,
    triplet_loss,
)
from dragkit.readout import _triplet_loss_and_grad
from dragkit.softmask import PointPair, generate_soft_mask, rasterize_drag_path, round_half_away
from dragkit.toydiffusion import (
    ToyDenoiser,
    ddim_step,
    denoise_to,
    extract_features,
    features_pullback,
    invert_to,
)

from .test_fields import dense_blur_oracle

GRAD_RTOL = 1e-4
INSTANCES = 20


def report(name, start):
    print(f"PASS - {name} ({time.time() - start:.2f}s)")


def rel_err(analytic, fd):
    denom = max(np.linalg.norm(fd), 1e-9)
    return np.linalg.norm(analytic - fd) / denom


def fd_gradient(fn, values, step=1e-5):
    grad = np.zeros_like(values)
    flat = grad.ravel()
    base = values.ravel()
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + step
        fp = fn(values)
        base[i] = orig - step
        fm = fn(values)
        base[i] = orig
        flat[i] = (fp - fm) / (2 * step)
    return grad


@pytest.fixture(scope="module")
def engine():
    return build_engine(EngineConfig(), seed=0)


class TestGradientSuite:
    def test_gradients_match_finite_differences(self, engine):
        start = time.time()
        rng = np.random.default_rng(42)
        denoiser = engine.denoiser
        schedule = engine.schedule

        # bilinear sampling: point and cell partials
        for _ in range(INSTANCES):
            grid = rng.standard_normal((7, 7))
            x, y = rng.uniform(0.6, 5.4, 2)
            full = sample_bilinear_full(grid, (x, y))
            step = 1e-4
            fd_x = (sample_bilinear(grid, (x + step, y)) - sample_bilinear(grid, (x - step, y))) / (2 * step)
            fd_y = (sample_bilinear(grid, (x, y + step)) - sample_bilinear(grid, (x, y - step))) / (2 * step)
            assert rel_err(np.array(full.grad_point), np.array([fd_x, fd_y])) < GRAD_RTOL
            fd_cells = []
            an_cells = []
            for (cy, cx), weight in zip(full.corner_indices, full.corner_weights):
                bumped = grid.copy()
                bumped[cy, cx] += step
                lowered = grid.copy()
                lowered[cy, cx] -= step
                fd_cells.append(
                    (sample_bilinear(bumped, (x, y)) - sample_bilinear(lowered, (x, y))) / (2 * step)
                )
                an_cells.append(weight)
            assert rel_err(np.array(an_cells), np.array(fd_cells)) < GRAD_RTOL

        # feature extraction via random linear functionals
        for _ in range(INSTANCES):
            z = rng.standard_normal((2, 8, 8))
            weights = [
                rng.standard_normal(l.shape)
                for l in extract_features(LatentField(z, 5), denoiser).layers
            ]

            def functional(values):
                feats = extract_features(LatentField(values, 5), denoiser)
                return sum(float(np.sum(w * l)) for w, l in zip(weights, feats.layers))

            analytic = features_pullback(weights, z.shape, denoiser)
            fd = fd_gradient(functional, z)
            assert rel_err(analytic, fd) < GRAD_RTOL

        # engine losses on random latents around the blob session; the
        # stop-gradient reference stays frozen at the base latent, which
        # is exactly what the analytic gradient claims to differentiate
        image = blob_scene()
        pairs = blob_pairs()
        cfg = blob_drag_config()
        session, *_ = start_session(image, pairs, cfg, engine.head, denoiser, schedule)
        t = session.current_latent.timestep

        for name, loss_fn in (("ms", motion_supervision_loss), ("drag", drag_loss)):
            for _ in range(INSTANCES):
                values = rng.standard_normal((4, 8, 8))
                session.current_latent = LatentField(values, t)
                base_feats = extract_features(session.current_latent, denoiser)
                _, idx, layer_grad = loss_fn(session, base_feats, base_feats)
                grads = [None] * len(base_feats.layers)
                grads[idx] = layer_grad
                analytic = features_pullback(grads, values.shape, denoiser)

                def fn(v):
                    session.current_latent = LatentField(v, t)
                    feats = extract_features(session.current_latent, denoiser)
                    loss, _, _ = loss_fn(session, feats, base_feats)
                    return loss

                fd = fd_gradient(fn, values.copy())
                assert rel_err(analytic, fd) < GRAD_RTOL, name

        # readout guidance loss
        head = engine.head
        ref = session.reference_embeddings[t]
        for _ in range(INSTANCES):
            values = rng.standard_normal((4, 8, 8))
            _, analytic = rg_loss(LatentField(values, t), ref, head, denoiser)

            def fn(v):
                loss, _ = rg_loss(LatentField(v, t), ref, head, denoiser)
                return loss

            fd = fd_gradient(fn, values.copy())
            assert rel_err(analytic, fd) < GRAD_RTOL

        # triplet loss with respect to head parameters
        delta = 1.2  # keeps the hinge active for random heads
        data = synthetic_triplets(INSTANCES, denoiser, 7, rng, shape=(4, 8, 8))
        for batch in data:
            head_i = ReadoutHead.create([4] * denoiser.pyramid_levels, width=4, rng=rng)
            _, grads = _triplet_loss_and_grad(batch, head_i, delta)
            step = 1e-6
            fd_all, an_all = [], []

            def loss_of(h):
                return triplet_loss(batch, h, delta)

            for li in range(head_i.layer_count):
                for pos in np.ndindex(head_i.bottlenecks[li].shape):
                    hp, hm = head_i.copy(), head_i.copy()
                    hp.bottlenecks[li][pos] += step
                    hm.bottlenecks[li][pos] -= step
                    fd_all.append((loss_of(hp) - loss_of(hm)) / (2 * step))
                    an_all.append(grads.bottlenecks[li][pos])
            for pos in np.ndindex(head_i.time_proj.shape):
                hp, hm = head_i.copy(), head_i.copy()
                hp.time_proj[pos] += step
                hm.time_proj[pos] -= step
                fd_all.append((loss_of(hp) - loss_of(hm)) / (2 * step))
                an_all.append(grads.time_proj[pos])
            for li in range(head_i.layer_count):
                hp, hm = head_i.copy(), head_i.copy()
                hp.agg_weights[li] += step
                hm.agg_weights[li] -= step
                fd_all.append((loss_of(hp) - loss_of(hm)) / (2 * step))
                an_all.append(grads.agg_weights[li])
            assert rel_err(np.array(an_all), np.array(fd_all)) < GRAD_RTOL

        elapsed = time.time() - start
        assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
        report("gradient suite", start)


class TestSoftMaskSuite:
    def test_soft_mask_criteria(self):
        start = time.time()
        rng = np.random.default_rng(1)
        dims = (64, 64)

        # formula conformance on 1,000 random pairs
        for _ in range(1000):
            x0, y0, x1, y1 = rng.integers(0, 64, 4)
            pair = PointPair((int(x0), int(y0)), (int(x1), int(y1)))
            raster = rasterize_drag_path(pair, dims)
            n = max(abs(int(x1) - int(x0)), abs(int(y1) - int(y0))) + 1
            assert raster.sample_count == n
            expected = []
            for k in range(n):
                a = 0.0 if n == 1 else k / (n - 1)
                expected.append(
                    (
                        round_half_away((1 - a) * int(x0) + a * int(x1)),
                        round_half_away((1 - a) * int(y0) + a * int(y1)),
                    )
                )
            assert list(raster.cells) == expected

        # normalization peak
        mask = generate_soft_mask([PointPair((4, 6), (28, 17))], dims, 5.0)
        assert mask.values.max() == 1.0

        # permutation invariance
        pairs = [PointPair((1, 2), (9, 4)), PointPair((30, 30), (40, 22)), PointPair((8, 60), (8, 50))]
        a = generate_soft_mask(pairs, dims, 4.0)
        b = generate_soft_mask(list(reversed(pairs)), dims, 4.0)
        assert np.array_equal(a.values, b.values)

        # sigma-monotone footprint growth
        areas = []
        for sigma in (1.0, 2.0, 4.0, 8.0, 16.0):
            m = generate_soft_mask([PointPair((20, 32), (44, 32))], dims, sigma)
            areas.append(int(np.sum(m.values >= 0.5)))
        assert all(b >= a for a, b in zip(areas, areas[1:]))

        # separable blur equals a dense 2-D convolution oracle
        grid = rng.standard_normal((24, 24))
        assert np.max(np.abs(gaussian_blur(grid, 2.0) - dense_blur_oracle(grid, 2.0))) < 1e-9

        report("soft-mask suite", start)


class TestLwfSuite:
    def test_lwf_criteria(self, engine):
        start = time.time()
        rng = np.random.default_rng(2)

        # inverse-distance weights normalize to 1 +- 1e-12
        for _ in range(200):
            handles = [tuple(rng.integers(0, 30, 2)) for _ in range(int(rng.integers(1, 6)))]
            w = inverse_distance_weights(tuple(rng.uniform(0, 30, 2)), handles, 1e-6)
            assert abs(w.sum() - 1.0) <= 1e-12

        # displacement magnitude bound
        from dragkit.softmask import SoftMask
        from dragkit.fields import ScalarGrid2D

        mask = SoftMask(ScalarGrid2D(np.ones((20, 20))), 0.0)
        for _ in range(10):
            pts = rng.integers(0, 20, size=(3, 4))
            pairs = [PointPair((int(a), int(b)), (int(c), int(d))) for a, b, c, d in pts]
            rho = float(rng.uniform(0, 1))
            field = compute_displacement_field(mask, pairs, LwfParams(rho=rho))
            bound = rho * max(
                np.hypot(p.target[0] - p.handle[0], p.target[1] - p.handle[1]) for p in pairs
            )
            assert np.linalg.norm(field.vectors, axis=2).max() <= bound + 1e-9

        # rectangle stretch-factor closed form
        lam = stretch_factor((5, 10), (10, 10), (1.0, 0.0), mask, 0.5)
        assert lam == pytest.approx(0.5)

        # zero-field warp is the identity, bit-exact
        latent = LatentField(rng.standard_normal((4, 8, 8)), 3)
        field = DisplacementField(np.zeros((8, 8, 2)), np.ones((8, 8), dtype=bool))
        assert np.array_equal(warp_latent(latent, field).values, latent.values)

        # rho = 0 turns the full pipeline into the pure round trip
        image = blob_scene()
        cfg = blob_drag_config(rho=0.0, max_drag_iterations=0)
        result = run_drag_edit(
            image, blob_pairs(), cfg, engine.head, engine.denoiser, engine.schedule
        )
        z0 = encode_image(image)
        zt = invert_to(z0, cfg.latent_timestep, engine.denoiser, engine.schedule)
        expected = decode_latent(denoise_to(zt, 0, engine.denoiser, engine.schedule), (64, 64))
        assert np.array_equal(result.image, expected)

        report("LWF suite", start)


class TestDdimSuite:
    def test_ddim_criteria(self, engine):
        start = time.time()
        rng = np.random.default_rng(3)
        denoiser, schedule = engine.denoiser, engine.schedule

        for t in range(1, 51):
            z = LatentField(rng.standard_normal((2, 8, 8)), t - 1)
            fwd = ddim_step(z, t, "forward", denoiser, schedule)
            back = ddim_step(fwd, t, "backward", denoiser, schedule)
            assert np.max(np.abs(back.values - z.values)) < 1e-6

        z0 = LatentField(rng.standard_normal((4, 16, 16)), 0)
        zt = invert_to(z0, 50, denoiser, schedule)
        rec = denoise_to(zt, 0, denoiser, schedule)
        assert np.mean(np.abs(rec.values - z0.values)) <= 1e-4

        report("DDIM suite", start)


class TestTrackingSuite:
    def test_tracking_criteria(self, engine):
        start = time.time()
        rng = np.random.default_rng(4)
        image = blob_scene()
        pairs = [PointPair((24, 32), (48, 40))]

        # exact recovery of synthetic translations up to r2
        for r2 in (2, 3):
            for _ in range(10):
                dx = int(rng.integers(-r2, r2 + 1))
                dy = int(rng.integers(-r2, r2 + 1))
                session, *_ = start_session(
                    image, pairs, blob_drag_config(tracking_radius=r2),
                    engine.head, engine.denoiser, engine.schedule,
                )
                base = rng.standard_normal((4, 8, 8))
                session.current_latent = LatentField(base, session.current_latent.timestep)
                feats = extract_features(session.current_latent, engine.denoiser)
                layer = feats.layers[0]
                qx, qy = _patch_points(session.track.current_handles[0], session.config.patch_radius)
                session.track.reference_patches[0] = sample_channels(layer, qx, qy)
                shifted = np.roll(base, (dy, dx), axis=(1, 2))
                session.current_latent = LatentField(shifted, session.current_latent.timestep)
                track_points(session, extract_features(session.current_latent, engine.denoiser))
                moved = session.track.current_handles[0] - np.array([3.0, 4.0])
                assert tuple(moved) == (float(dx), float(dy)), (dx, dy, moved)

        # tie-break determinism, enumerated
        session, *_ = start_session(
            image, [PointPair((24, 32), (48, 32))], blob_drag_config(tracking_radius=2),
            engine.head, engine.denoiser, engine.schedule,
        )
        sharp = ToyDenoiser(smoothing_sigma=0.4, pyramid_sigmas=(0.0,))
        values = np.zeros((4, 8, 8))
        values[:, 4, 4] = 5.0
        values[:, 4, 5] = 5.0
        values[:, 4, 2] = -5.0
        session.current_latent = LatentField(values, session.current_latent.timestep)
        feats = extract_features(session.current_latent, sharp)
        ref = np.zeros((4, 9))
        ref[:, 4] = 5.0
        session.track.reference_patches[0] = ref
        track_points(session, feats)
        assert tuple(session.track.current_handles[0]) == (4.0, 4.0)

        report("tracking suite", start)


class TestBlobBenchmark:
    def test_end_to_end_blob(self, engine):
        start = time.time()
        image = blob_scene()
        pairs = blob_pairs()

        main = run_drag_edit(
            image, pairs, blob_drag_config(), engine.head, engine.denoiser, engine.schedule
        )
        lwf_only = run_drag_edit(
            image, pairs, blob_drag_config(max_drag_iterations=0),
            engine.head, engine.denoiser, engine.schedule,
        )
        no_rg = run_drag_edit(
            image, pairs, blob_drag_config(rg_weight=0.0),
            engine.head, engine.denoiser, engine.schedule,
        )

        assert main.report.mean_distance <= 3.0
        assert main.report.mean_distance < lwf_only.report.mean_distance
        mae_rg = outside_mask_mae(image, main.image, main.mask_image.values)
        mae_none = outside_mask_mae(image, no_rg.image, no_rg.mask_image.values)
        assert mae_rg < mae_none

        elapsed = time.time() - start
        assert elapsed <= 120.0
        print(
            f"PASS - blob benchmark (MD {main.report.mean_distance:.2f}, "
            f"LWF-only MD {lwf_only.report.mean_distance:.2f}, "
            f"outside MAE {mae_rg:.6f} vs {mae_none:.6f}, {elapsed:.2f}s)"
        )


class TestDeterminism:
    def test_cli_edit_byte_identical(self, tmp_path):
        start = time.time()
        image_path = tmp_path / "blob.png"
        write_blob_scene(image_path)
        points_path = tmp_path / "points.json"
        points_path.write_text(json.dumps([{"handle": [24, 32], "target": [40, 32]}]))
        cfg = blob_drag_config()
        config_path = tmp_path / "config.json"
        config_path.write_text(
            json.dumps(
                {
                    "drag": {
                        "drag_steps_per_denoise": cfg.drag_steps_per_denoise,
                        "patch_radius": cfg.patch_radius,
                        "tracking_radius": cfg.tracking_radius,
                        "learning_rate": cfg.learning_rate,
                        "max_drag_iterations": cfg.max_drag_iterations,
                        "rg_weight": cfg.rg_weight,
                        "rho": cfg.rho,
                        "mask_sigma": cfg.mask_sigma,
                        "latent_timestep": cfg.latent_timestep,
                        "use_motion_supervision": cfg.use_motion_supervision,
                    }
                }
            )
        )
        digests = []
        for name in ("first", "second"):
            out = tmp_path / name
            result = CliRunner().invoke(
                cli_main,
                ["edit", "--image", str(image_path), "--points", str(points_path),
                 "--config", str(config_path), "--out", str(out), "--seed", "11"],
            )
            assert result.exit_code == 0, result.output
            digests.append(
                tuple(
                    hashlib.sha256((out / f).read_bytes()).hexdigest()
                    for f in ("edited.png", "mask.png", "report.json")
                )
            )
        assert digests[0] == digests[1]
        report("determinism", start)


class TestReadoutTraining:
    def test_training_convergence(self, engine):
        start = time.time()
        rng = np.random.default_rng(0)
        denoiser = engine.denoiser
        # margin 0.8 leaves the random initialization genuinely violated
        head = ReadoutHead.create(
            [4] * denoiser.pyramid_levels, width=6, margin=0.8, rng=rng
        )
        data = synthetic_triplets(50, denoiser, 25, rng, shape=(4, 16, 16))
        delta = head.margin

        losses = [mean_triplet_loss(data, head, delta)]
        assert losses[0] > 0
        current = head
        for _ in range(100):
            current = train_readout(data, current, steps=1, learning_rate=0.05)
            losses.append(mean_triplet_loss(data, current, delta))
        assert all(b <= a + 1e-10 for a, b in zip(losses, losses[1:])), "not monotone"

        steps_used = 100
        while losses[-1] >= 0.05 * delta and steps_used < 2000:
            current = train_readout(data, current, steps=100, learning_rate=0.05)
            losses.append(mean_triplet_loss(data, current, delta))
            steps_used += 100
        assert losses[-1] < 0.05 * delta, f"loss {losses[-1]} after {steps_used} steps"
        print(
            f"PASS - readout training (loss {losses[0]:.3f} -> {losses[-1]:.5f} "
            f"in <= {steps_used} steps, {time.time() - start:.2f}s)"
        )
