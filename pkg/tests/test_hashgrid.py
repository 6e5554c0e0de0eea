"""
Tests for the multi-resolution hash-grid encoder.

This module tests:
- Level resolutions and the spatial hash
- The cosine level window and progress schedule
- Encoding values, clamping and gradients
"""

import pytest
import numpy as np

import autodiff as ad
from autodiff import ParamBlock
from errors import NumericalError, SceneValidationError
from hashgrid import (
    PRIMES,
    GridConfig,
    HashGridEncoder,
    cosine_window,
    growth_factor,
    hash_index,
    level_resolutions,
    progress_to_alpha,
)


def big_int_hash(vertex, table_size):
    h = 0
    for v, p in zip(vertex, PRIMES):
        h ^= (v * p) % 2 ** 32
    return h % table_size


@pytest.fixture
def encoder(tiny_grid_config):
    return HashGridEncoder(tiny_grid_config, np.random.default_rng(0), name="test")


class TestResolutions:
    """Tests for the per-level lattice resolutions."""

    def test_default_levels(self):
        """Test that the default grid spans 14 to 4069 over 16 levels."""
        resolutions = level_resolutions(GridConfig())
        assert len(resolutions) == 16
        assert resolutions[0] == 14
        assert resolutions[-1] == 4069
        assert np.all(np.diff(resolutions) > 0)

    def test_equal_bounds(self):
        """Test that n_min == n_max gives growth 1 and constant resolution."""
        config = GridConfig(levels=3, n_min=8, n_max=8, table_size=2 ** 10)
        assert growth_factor(config) == 1.0
        assert level_resolutions(config).tolist() == [8, 8, 8]

    def test_tiny_levels(self, tiny_grid_config):
        """Test the two-level test grid."""
        assert level_resolutions(tiny_grid_config).tolist() == [2, 4]

    @pytest.mark.parametrize(
        "changes",
        [{"levels": 1}, {"n_min": 0}, {"n_max": 1, "n_min": 4}, {"table_size": 100}, {"features": 0}],
    )
    def test_invalid_config(self, changes):
        """Test that invalid grid settings raise SceneValidationError."""
        config = GridConfig(**changes)
        with pytest.raises(SceneValidationError):
            config.validate()


class TestHash:
    """Tests for the spatial hash."""

    def test_origin(self):
        """Test that the origin hashes to zero."""
        assert hash_index((0, 0, 0), 2 ** 14) == 0

    def test_golden_value(self):
        """Test the pinned hash of (1, 2, 3) for a 2^14 table."""
        assert hash_index((1, 2, 3), 2 ** 14) == 13788
        assert big_int_hash((1, 2, 3), 2 ** 14) == 13788

    def test_matches_big_integers(self):
        """Test the vectorized hash against Python big-integer arithmetic."""
        rng = np.random.default_rng(4)
        vertices = rng.integers(0, 5000, size=(200, 3))
        hashed = hash_index(vertices, 2 ** 19)
        expected = [big_int_hash(tuple(int(c) for c in v), 2 ** 19) for v in vertices]
        assert hashed.tolist() == expected

    def test_range(self):
        """Test that indices stay inside the table."""
        vertices = np.random.default_rng(1).integers(0, 10 ** 6, size=(500, 3))
        hashed = hash_index(vertices, 2 ** 8)
        assert hashed.min() >= 0 and hashed.max() < 2 ** 8

    def test_table_size_power_of_two(self):
        """Test that a non power-of-two table size raises ValueError."""
        with pytest.raises(ValueError):
            hash_index((1, 1, 1), 1000)


class TestWindow:
    """Tests for the coarse-to-fine level window."""

    @pytest.mark.parametrize("offset,expected", [(-0.5, 0.0), (0.0, 0.0), (0.5, 0.5), (1.0, 1.0), (3.0, 1.0)])
    def test_branches(self, offset, expected):
        """Test the zero, ramp and one branches at their boundaries."""
        assert cosine_window(2, 2 + offset) == pytest.approx(expected, abs=1e-15)

    def test_vectorized(self):
        """Test that the window accepts an array of levels."""
        weights = cosine_window(np.arange(4), 1.5)
        assert weights.tolist() == pytest.approx([1.0, 0.5, 0.0, 0.0])

    def test_progress_schedule(self):
        """Test that alpha ramps linearly over the configured interval."""
        assert progress_to_alpha(0, 100, (0.1, 0.5), 16) == 0.0
        assert progress_to_alpha(10, 100, (0.1, 0.5), 16) == 0.0
        assert progress_to_alpha(30, 100, (0.1, 0.5), 16) == pytest.approx(8.0)
        assert progress_to_alpha(50, 100, (0.1, 0.5), 16) == pytest.approx(16.0)
        assert progress_to_alpha(100, 100, (0.1, 0.5), 16) == 16.0


class TestEncoding:
    """Tests for encoder values."""

    def test_table_layout(self, encoder):
        """Test that the coarse level is dense and the fine level hashed."""
        assert encoder.dense == [True, False]
        assert encoder.tables[0].shape == (27, 2)
        assert encoder.tables[1].shape == (64, 2)
        assert encoder.output_dim == 4

    def test_lattice_vertex_reads_table_row(self, encoder):
        """Test that a point on a coarse lattice vertex returns that row exactly."""
        features = encoder.encode(np.array([[0.5, 0.5, 0.5]]))
        row = 1 + 3 * (1 + 3 * 1)
        assert np.array_equal(features[0, :2], encoder.tables[0].values[row])

    def test_full_window_is_unwindowed(self, encoder):
        """Test that alpha = L reproduces the unwindowed encoding bit-exactly."""
        x = np.random.default_rng(2).uniform(size=(20, 3))
        assert np.array_equal(encoder.encode(x, alpha=float(encoder.levels)), encoder.encode(x))

    def test_zero_window_is_zero(self, encoder):
        """Test that alpha = 0 gates every level to zero."""
        x = np.random.default_rng(2).uniform(size=(5, 3))
        assert np.array_equal(encoder.encode(x, alpha=0.0), np.zeros((5, 4)))

    def test_partial_window_scales_level(self, encoder):
        """Test that a half-open window halves the second level."""
        x = np.random.default_rng(3).uniform(size=(5, 3))
        full = encoder.encode(x)
        half = encoder.encode(x, alpha=1.5)
        assert np.array_equal(half[:, :2], full[:, :2])
        assert np.allclose(half[:, 2:], 0.5 * full[:, 2:])

    def test_outside_points_are_clamped(self, encoder):
        """Test that points outside the unit cube encode like their clamped copies."""
        x = np.array([[-0.4, 0.3, 1.7]])
        assert np.array_equal(encoder.encode(x), encoder.encode(np.clip(x, 0.0, 1.0)))

    def test_non_finite_input(self, encoder):
        """Test that NaN coordinates raise NumericalError."""
        with pytest.raises(NumericalError):
            encoder.encode(np.array([[0.1, np.nan, 0.2]]))

    def test_expression_matches_numeric(self, encoder):
        """Test that encode_expr and encode agree."""
        x = np.random.default_rng(5).uniform(size=(7, 3))
        assert np.array_equal(encoder.encode_expr(x, 1.3).value, encoder.encode(x, 1.3))


class TestEncodingGradients:
    """Finite-difference checks of the encoder derivatives."""

    @pytest.fixture
    def points(self):
        # Away from cell faces of both levels
        return np.array([[0.31, 0.58, 0.12], [0.66, 0.41, 0.93], [0.2, 0.2, 0.7]])

    def test_table_gradient(self, encoder, points):
        """Test gradients with respect to every level table."""
        weights = np.random.default_rng(6).normal(size=(3, 4))

        for table in encoder.tables:
            def fn():
                return ad.reduce_sum(ad.square(encoder.encode_expr(points, 1.5)) * weights)

            assert ad.finite_difference_check(fn, table) < 1e-6

    def test_position_gradient(self, encoder, points):
        """Test gradients with respect to the input positions."""
        x = ParamBlock(points)
        weights = np.random.default_rng(7).normal(size=(3, 4))

        def fn():
            return ad.reduce_sum(encoder.encode_expr(ad.param(x)) * weights)

        assert ad.finite_difference_check(fn, x) < 1e-6

    def test_jacobian_matches_differences(self, encoder, points):
        """Test the spatial Jacobian against central differences of encode."""
        jacobian = encoder.jacobian_expr(points, 1.5).value
        step = 1e-6
        for axis in range(3):
            delta = np.zeros(3)
            delta[axis] = step
            numeric = (encoder.encode(points + delta, 1.5) - encoder.encode(points - delta, 1.5)) / (2 * step)
            assert np.allclose(jacobian[:, :, axis], numeric, atol=1e-6)

    def test_jacobian_table_gradient(self, encoder, points):
        """Test that the Jacobian is differentiable with respect to the tables."""
        weights = np.random.default_rng(8).normal(size=(3, 4, 3))

        def fn():
            return ad.reduce_sum(encoder.jacobian_expr(points) * weights)

        assert ad.finite_difference_check(fn, encoder.tables[1]) < 1e-6
