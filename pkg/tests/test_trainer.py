"""
Tests for Stage-1 training.

This module tests:
- Pose perturbation
- Training state initialization and single steps
- Loss logs, pose snapshots and checkpoints
- Determinism and resuming from a checkpoint
"""

import dataclasses

import pytest
import numpy as np

from errors import NumericalError, SceneValidationError
from lie_se3 import rotation_error_deg, so3_exp
from trainer import (
    LOG_COLUMNS,
    init_state,
    load_state,
    perturb_poses,
    save_state,
    train_stage1,
    train_step,
)


class TestPerturbPoses:
    """Tests for the se(3) noise protocol."""

    def test_zero_sigma(self):
        """Test that sigma 0 leaves poses unchanged."""
        R = so3_exp(np.random.default_rng(0).normal(size=(3, 3)))
        t = np.arange(9.0).reshape(3, 3)
        noisy_R, noisy_t = perturb_poses(R, t, 0.0, np.random.default_rng(1))
        assert np.array_equal(noisy_R, R)
        assert np.array_equal(noisy_t, t)

    def test_mean_rotation_angle(self):
        """Test that sigma 0.15 gives a mean rotation of 0.15 * sqrt(8 / pi) rad."""
        n = 10000
        R = np.repeat(np.eye(3)[None], n, axis=0)
        noisy_R, _ = perturb_poses(R, np.zeros((n, 3)), 0.15, np.random.default_rng(2))
        expected = np.degrees(0.15 * np.sqrt(8.0 / np.pi))
        assert expected == pytest.approx(13.7, abs=0.05)
        assert np.mean(rotation_error_deg(noisy_R, R)) == pytest.approx(expected, rel=0.02)

    def test_seeded(self):
        """Test that a fixed seed reproduces the noise bit-exactly."""
        R = np.repeat(np.eye(3)[None], 4, axis=0)
        t = np.zeros((4, 3))
        a = perturb_poses(R, t, 0.1, np.random.default_rng(5))
        b = perturb_poses(R, t, 0.1, np.random.default_rng(5))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_negative_sigma(self):
        """Test that a negative sigma raises ValueError."""
        with pytest.raises(ValueError):
            perturb_poses(np.eye(3)[None], np.zeros((1, 3)), -0.1, np.random.default_rng(0))


class TestInitState:
    """Tests for fresh training states."""

    def test_corrections_start_at_zero(self, synthetic_scene, tiny_train_config):
        """Test the camera count, zero corrections and perturbed base poses."""
        state = init_state(synthetic_scene, tiny_train_config)
        assert len(state.cameras) == 4
        assert np.array_equal(state.corrections.values, np.zeros((4, 6)))
        base_R, _ = state.base_poses
        assert np.all(rotation_error_deg(base_R, state.gt_R) > 0.0)
        assert state.step == 0

    def test_needs_two_views(self, synthetic_scene, tiny_train_config):
        """Test that fewer than 2 train views raise SceneValidationError."""
        synthetic_scene.split = ["train"] + ["test"] * (len(synthetic_scene.split) - 1)
        with pytest.raises(SceneValidationError):
            init_state(synthetic_scene, tiny_train_config)

    def test_window_progress(self, synthetic_scene, tiny_train_config):
        """Test that the window opens over the run and is full when disabled."""
        state = init_state(synthetic_scene, tiny_train_config)
        assert state.alpha(0) == 0.0
        assert state.alpha(6) == 2.0
        disabled = init_state(synthetic_scene, dataclasses.replace(tiny_train_config, c2f_enabled=False))
        assert disabled.alpha(0) == 2.0


class TestTrainStep:
    """Tests for single optimization steps."""

    def test_step_updates_parameters(self, synthetic_scene, tiny_train_config):
        """Test that a step advances the counter and moves field and pose parameters."""
        state = init_state(synthetic_scene, tiny_train_config)
        images = [synthetic_scene.images[i] for i in state.train_indices]
        before = state.model.diffuse_mlp.weights[0].values.copy()
        result = train_step(state, images)
        assert state.step == 1
        assert np.isfinite(result.total)
        assert result.lr_nerf == 1e-3 and result.lr_pose == 1e-4
        assert not np.array_equal(state.model.diffuse_mlp.weights[0].values, before)
        assert np.any(state.corrections.values != 0.0)

    def test_pose_frozen_without_photometric_terms(self, synthetic_scene, tiny_train_config):
        """Test that corrections stay exactly zero when only the eikonal term is active."""
        config = dataclasses.replace(tiny_train_config, lambda_photo=0.0, lambda_spec=0.0, lambda_entropy=0.0)
        state = init_state(synthetic_scene, config)
        images = [synthetic_scene.images[i] for i in state.train_indices]
        for _ in range(4):
            train_step(state, images)
        assert np.array_equal(state.corrections.values, np.zeros((4, 6)))

    def test_non_finite_loss(self, synthetic_scene, tiny_train_config, output_dir):
        """Test that a non-finite loss aborts and leaves a last-good checkpoint."""
        state = init_state(synthetic_scene, tiny_train_config)
        head = state.model.diffuse_mlp.biases[-1]
        head.assign(np.full(head.shape, np.nan))
        with pytest.raises(NumericalError):
            train_stage1(synthetic_scene, state=state, out_dir=output_dir)
        assert (output_dir / "checkpoint_last_good.npz").exists()
        assert state.step == 0


class TestTrainingRun:
    """Tests for the full Stage-1 loop and its outputs."""

    def test_outputs(self, synthetic_scene, tiny_train_config, output_dir):
        """Test the log header, logged steps, pose snapshots and final checkpoint."""
        state = train_stage1(synthetic_scene, tiny_train_config, output_dir)
        assert state.step == 6
        lines = (output_dir / "train_log.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(LOG_COLUMNS)
        assert [line.split(",")[0] for line in lines[1:]] == ["2", "4", "6"]
        with np.load(output_dir / "pose_history.npz") as history:
            assert history["steps"].tolist() == [0, 2, 6]
            assert history["R"].shape == (3, 4, 3, 3)
        assert (output_dir / "checkpoint.npz").exists()
        assert state.training_time > 0.0

    def test_deterministic(self, synthetic_scene, tiny_train_config, temp_dir):
        """Test that two runs with one seed write identical loss logs."""
        train_stage1(synthetic_scene, tiny_train_config, temp_dir / "a")
        train_stage1(synthetic_scene, tiny_train_config, temp_dir / "b")
        first = (temp_dir / "a" / "train_log.csv").read_bytes()
        second = (temp_dir / "b" / "train_log.csv").read_bytes()
        assert first == second

    def test_resume_matches_uninterrupted(self, synthetic_scene, tiny_train_config, temp_dir):
        """Test that stopping, reloading and continuing equals one uninterrupted run."""
        full = train_stage1(synthetic_scene, tiny_train_config, temp_dir / "full")

        train_stage1(synthetic_scene, tiny_train_config, temp_dir / "part", stop_at=3)
        resumed = load_state(temp_dir / "part" / "checkpoint.npz")
        assert resumed.step == 3
        resumed = train_stage1(synthetic_scene, state=resumed, out_dir=temp_dir / "resumed")

        for a, b in zip(full.model.parameters(), resumed.model.parameters()):
            assert np.array_equal(a.values, b.values), a.name
        assert np.array_equal(full.corrections.values, resumed.corrections.values)
        assert (temp_dir / "full" / "train_log.csv").read_bytes() == (
            temp_dir / "resumed" / "train_log.csv"
        ).read_bytes()

    def test_checkpoint_round_trip(self, synthetic_scene, tiny_train_config, output_dir):
        """Test that saving and loading restores parameters, poses and counters exactly."""
        state = train_stage1(synthetic_scene, dataclasses.replace(tiny_train_config, iterations=2))
        path = output_dir / "state.npz"
        save_state(state, path)
        loaded = load_state(path)
        assert loaded.step == state.step
        assert loaded.config == state.config
        for a, b in zip(state.model.parameters(), loaded.model.parameters()):
            assert np.array_equal(a.values, b.values)
        assert np.array_equal(loaded.corrections.values, state.corrections.values)
        assert np.array_equal(loaded.grid.sigma, state.grid.sigma)
        for a, b in zip(state.refined_poses(), loaded.refined_poses()):
            assert np.array_equal(a, b)
        assert loaded.cameras[0].focal == state.cameras[0].focal
        assert loaded.history == state.history

    @pytest.mark.slow
    def test_photometric_loss_decreases(self, synthetic_scene, tiny_train_config, output_dir):
        """Test that the photometric loss falls over a short noise-free run."""
        config = dataclasses.replace(
            tiny_train_config,
            iterations=80,
            rays_per_batch=64,
            noise_sigma=0.0,
            lr_nerf=(1e-2, 1e-3),
            log_every=1,
        )
        state = train_stage1(synthetic_scene, config, output_dir)
        photo = np.array([row[2] for row in state.history])
        assert photo[-10:].mean() < photo[:10].mean()
