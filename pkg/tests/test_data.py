import numpy as np
import pytest

from litedepth.data import (
    DirectorySource, SyntheticSource, Triplet, augment, average_intrinsics,
    generate_synthetic_sequence, load_triplet_dir, occlusion_boundary_mask,
    save_dataset,
)
from litedepth.data import _jitter
from litedepth.engine import Tensor, no_grad
from litedepth.losses import auto_mask, photometric_loss
from litedepth.warp import CameraIntrinsics, synthesize


SIZE = (64, 32)


class TestRenderer:
    def test_same_seed_bit_identical(self):
        a = generate_synthetic_sequence(5, 4, SIZE)
        b = generate_synthetic_sequence(5, 4, SIZE)
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.depths, b.depths)
        np.testing.assert_array_equal(a.poses, b.poses)

    def test_different_seed_differs(self):
        a = generate_synthetic_sequence(5, 2, SIZE)
        b = generate_synthetic_sequence(6, 2, SIZE)
        assert np.abs(a.frames - b.frames).max() > 0.01

    def test_static_trajectory_identical_frames(self):
        seq = generate_synthetic_sequence(5, 4, SIZE, motion_scale=0.0)
        for i in range(1, 4):
            np.testing.assert_array_equal(seq.frames[i], seq.frames[0])

    def test_depth_within_scene_budget(self):
        seq = generate_synthetic_sequence(9, 3, SIZE)
        assert seq.depths.min() >= 2.0
        assert seq.depths.max() <= 50.0

    def test_frames_in_unit_range(self):
        seq = generate_synthetic_sequence(9, 3, SIZE)
        assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0

    def test_empty_layout_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            generate_synthetic_sequence(1, 2, SIZE, n_rects=0)

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            generate_synthetic_sequence(1, 2, (60, 34))

    def test_per_frame_camera_step_in_learnable_band(self):
        seq = generate_synthetic_sequence(3, 16, SIZE)
        steps = np.linalg.norm(np.diff(seq.poses[:, :3, 3], axis=0), axis=1)
        assert steps.min() >= 0.05 and steps.max() <= 0.2


class TestRendererWarperCrossValidation:
    """The renderer and the differentiable warper implement the same
    geometry independently; warping a neighbor frame with ground-truth
    depth and pose must reproduce the target almost exactly."""

    # motion_scale 0.7 keeps per-frame steps inside the learnable band while
    # leaving margin to the photometric budget at the bad-luck seeds
    def test_gt_warp_error_below_budget(self):
        seq = generate_synthetic_sequence(7, 6, (128, 64), motion_scale=0.7)
        t, s = 2, 3
        with no_grad():
            warped, valid = synthesize(
                Tensor(seq.frames[s][None]), Tensor(seq.depths[t][None, None]),
                seq.relative_transform(t, s), seq.intrinsics)
        err = np.abs(warped.data[0] - seq.frames[t]).mean(axis=0)
        keep = valid[0, 0] & ~occlusion_boundary_mask(seq.depths[t])
        assert keep.mean() > 0.4
        assert err[keep].mean() < 0.02

    def test_gt_depth_strictly_beats_doubled_depth(self):
        seq = generate_synthetic_sequence(7, 6, (128, 64), motion_scale=0.7)
        t, s = 2, 3
        tf = seq.relative_transform(t, s)
        errs = []
        with no_grad():
            for scale in (1.0, 2.0):
                warped, valid = synthesize(
                    Tensor(seq.frames[s][None]),
                    Tensor(scale * seq.depths[t][None, None]), tf, seq.intrinsics)
                err = np.abs(warped.data[0] - seq.frames[t]).mean(axis=0)
                keep = valid[0, 0] & ~occlusion_boundary_mask(seq.depths[t])
                errs.append(err[keep].mean())
        assert errs[0] < errs[1]

    def test_previous_frame_also_warps(self):
        seq = generate_synthetic_sequence(21, 6, (128, 64), motion_scale=0.7)
        t, s = 2, 1
        with no_grad():
            warped, valid = synthesize(
                Tensor(seq.frames[s][None]), Tensor(seq.depths[t][None, None]),
                seq.relative_transform(t, s), seq.intrinsics)
        err = np.abs(warped.data[0] - seq.frames[t]).mean(axis=0)
        keep = valid[0, 0] & ~occlusion_boundary_mask(seq.depths[t])
        assert err[keep].mean() < 0.02


class TestMoverAutoMask:
    def test_camera_speed_mover_is_masked_out(self):
        seq = generate_synthetic_sequence(11, 6, (128, 64), mover=True)
        t = 2
        tgt = Tensor(seq.frames[t][None])
        unwarped, warped = [], []
        with no_grad():
            for s in (t - 1, t + 1):
                out, _ = synthesize(
                    Tensor(seq.frames[s][None]), Tensor(seq.depths[t][None, None]),
                    seq.relative_transform(t, s), seq.intrinsics)
                warped.append(photometric_loss(out, tgt, 0.85))
                unwarped.append(photometric_loss(Tensor(seq.frames[s][None]), tgt, 0.85))
        mu = auto_mask(unwarped, warped)
        mover = seq.mover_mask[t]
        assert mover.sum() > 100
        assert (mu[0, 0][mover] == 0).mean() >= 0.90
        # the static remainder keeps most pixels
        assert mu[0, 0][~mover].mean() > 0.5


class TestAugment:
    def make_triplet(self, seed=4):
        seq = generate_synthetic_sequence(seed, 3, SIZE)
        return Triplet(frames=(seq.frames[0], seq.frames[1], seq.frames[2]),
                       intrinsics=seq.intrinsics, gt_depth=seq.depths[1])

    def test_deterministic_per_seed(self):
        t = self.make_triplet()
        a = augment(t, seed=12)
        b = augment(t, seed=12)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa, fb)
        if a.frames_jittered is not None:
            for fa, fb in zip(a.frames_jittered, b.frames_jittered):
                np.testing.assert_array_equal(fa, fb)

    def test_forced_flip_is_involution(self):
        t = self.make_triplet()
        once = augment(t, seed=0, force_flip=True)
        twice = augment(once, seed=0, force_flip=True)
        for fa, fb in zip(twice.frames, t.frames):
            np.testing.assert_array_equal(fa, fb)
        assert twice.intrinsics.cx == pytest.approx(t.intrinsics.cx)

    def test_flip_mirrors_principal_point(self):
        t = self.make_triplet()
        flipped = augment(t, seed=0, force_flip=True)
        w = t.intrinsics.width
        assert flipped.intrinsics.cx == pytest.approx(w - 1 - t.intrinsics.cx)

    def test_brightness_clamp_keeps_white_white(self):
        white = np.ones((3, 8, 8))
        out = _jitter(white, order=[0], brightness=1.2, contrast=1.0,
                      saturation=1.0, hue=0.0)
        np.testing.assert_array_equal(out, white)

    def test_jitter_preserves_shape_and_range(self):
        t = self.make_triplet()
        out = _jitter(t.frames[0], order=[0, 1, 2, 3], brightness=1.2,
                      contrast=0.8, saturation=1.2, hue=0.07)
        assert out.shape == t.frames[0].shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_hue_roundtrip_identity(self):
        from litedepth.data import _hsv_to_rgb, _rgb_to_hsv
        rng = np.random.default_rng(0)
        img = rng.random((3, 5, 5))
        back = _hsv_to_rgb(_rgb_to_hsv(img))
        np.testing.assert_allclose(back, img, atol=1e-12)

    def test_targets_stay_clean_by_default(self):
        t = self.make_triplet()
        for seed in range(10):
            out = augment(t, seed=seed)
            if out.frames_jittered is not None:
                base = out.frames[1]
                assert np.abs(out.network_frames()[1] - base).max() >= 0.0
                # clean targets equal the (possibly flipped) originals
                flipped = augment(t, seed=seed, force_flip=True)
                break

    def test_flip_with_mirrored_cx_preserves_warp_geometry(self):
        """Flipping frames, depth and cx together reproduces the unflipped
        warp; keeping the original cx breaks it. An off-center principal
        point makes the mirroring non-trivial."""
        intr = CameraIntrinsics(fx=115.2, fy=115.2, cx=70.0, cy=31.5,
                                width=128, height=64)
        seq = generate_synthetic_sequence(13, 4, (128, 64), intrinsics=intr)
        t, s = 1, 2
        tf = seq.relative_transform(t, s)
        mirror = np.diag([-1.0, 1.0, 1.0, 1.0])
        tf_flipped = mirror @ tf @ mirror

        def warp_error(frames_s, depth_t, target, intr, transform):
            with no_grad():
                out, valid = synthesize(Tensor(frames_s[None]),
                                        Tensor(depth_t[None, None]),
                                        transform, intr)
            err = np.abs(out.data[0] - target).mean(axis=0)
            return err[valid[0, 0]].mean()

        base = warp_error(seq.frames[s], seq.depths[t], seq.frames[t],
                          seq.intrinsics, tf)
        flip = warp_error(seq.frames[s][:, :, ::-1].copy(),
                          seq.depths[t][:, ::-1].copy(),
                          seq.frames[t][:, :, ::-1].copy(),
                          seq.intrinsics.flipped(), tf_flipped)
        broken = warp_error(seq.frames[s][:, :, ::-1].copy(),
                            seq.depths[t][:, ::-1].copy(),
                            seq.frames[t][:, :, ::-1].copy(),
                            seq.intrinsics, tf_flipped)
        # proper mirroring preserves the warp to rounding; a stale cx
        # misplaces every ray and measurably degrades it
        assert abs(flip - base) < 1e-9
        assert broken - base > 1e-3


class TestIntrinsics:
    def test_average_of_identical_is_same(self):
        intr = CameraIntrinsics(100.0, 110.0, 32.0, 16.0, 64, 32)
        out = average_intrinsics([intr, intr, intr])
        assert out == intr

    def test_two_item_mean(self):
        a = CameraIntrinsics(100.0, 100.0, 30.0, 15.0, 64, 32)
        b = CameraIntrinsics(200.0, 150.0, 34.0, 17.0, 64, 32)
        out = average_intrinsics([a, b])
        assert out.fx == 150.0 and out.fy == 125.0
        assert out.cx == 32.0 and out.cy == 16.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            average_intrinsics([])

    def test_resize_scales_focal_lengths(self):
        intr = CameraIntrinsics(100.0, 100.0, 63.5, 31.5, 128, 64)
        half = intr.scaled(64, 32)
        assert half.fx == 50.0 and half.fy == 50.0
        assert half.cx == 31.75 and half.cy == 15.75


class TestDatasetDirectory:
    def test_roundtrip_and_resize(self, tmp_path):
        seq = generate_synthetic_sequence(3, 4, (128, 64))
        save_dataset(seq, tmp_path)
        trip = load_triplet_dir(tmp_path, 1)
        assert trip.frames[1].shape == (3, 64, 128)
        # 8-bit quantization bounds the reload error
        assert np.abs(trip.frames[1] - seq.frames[1]).max() < 1.0 / 255.0 + 1e-9
        np.testing.assert_allclose(trip.gt_depth, seq.depths[1], atol=1e-6)
        np.testing.assert_allclose(trip.gt_poses, seq.poses[0:3], atol=1e-12)

        half = load_triplet_dir(tmp_path, 1, size=(64, 32))
        assert half.frames[1].shape == (3, 32, 64)
        assert half.intrinsics.fx == pytest.approx(seq.intrinsics.fx / 2)
        assert half.intrinsics.cx == pytest.approx(seq.intrinsics.cx / 2)

    def test_boundary_indices_rejected(self, tmp_path):
        seq = generate_synthetic_sequence(3, 3, SIZE)
        save_dataset(seq, tmp_path)
        with pytest.raises(IndexError, match="neighbors"):
            load_triplet_dir(tmp_path, 0)
        with pytest.raises(IndexError, match="neighbors"):
            load_triplet_dir(tmp_path, 2)

    def test_missing_directory_errors_with_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="frames"):
            load_triplet_dir(tmp_path / "nope", 1)

    def test_sources(self, tmp_path):
        src = SyntheticSource(seed=1, n_frames=5, size=SIZE)
        assert len(src) == 3
        trip = src.triplet(0)
        assert trip.gt_depth is not None and trip.gt_poses.shape == (3, 4, 4)

        save_dataset(src.sequence, tmp_path)
        dsrc = DirectorySource(tmp_path, size=SIZE)
        assert len(dsrc) == 3
        trip2 = dsrc.triplet(0)
        assert trip2.frames[1].shape == trip.frames[1].shape
