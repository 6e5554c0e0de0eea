"""
Tests for ray generation, sampling and compositing.

This module tests:
- Pixel directions and pose-corrected rays
- Stratified and occupancy-restricted sampling
- Front-to-back compositing and its gradient
- Occupancy grid targets and loss
- Full renders of analytic and learned fields
"""

from types import SimpleNamespace

import pytest
import numpy as np

import autodiff as ad
from autodiff import ParamBlock
from field import AppearanceSample
from lie_se3 import CameraPose
from renderer import (
    Camera,
    OccupancyGrid,
    TransmittanceOp,
    all_pixels,
    composite,
    generate_ray_batch,
    generate_rays,
    grid_loss,
    occupancy_targets,
    opacity_proxy,
    render_image,
    render_rays,
    render_rays_expr,
    sample_rays,
    stratified_depths,
    transmittance_weights,
    update_occupancy,
)


class AnalyticSphere:
    """Sphere of radius 0.25 at the box center with a constant albedo."""

    albedo = np.array([0.2, 0.4, 0.6])

    def __init__(self, sharpness=400.0):
        self.sharpness = sharpness
        self.config = SimpleNamespace(eps=1e-6)

    def sdf(self, x, alpha=None):
        return np.linalg.norm(np.asarray(x) - 0.5, axis=-1) - 0.25

    def appearance(self, x, v, alpha=None):
        c_d = np.tile(self.albedo, (len(x), 1))
        c_s = np.zeros_like(c_d)
        return AppearanceSample(c_d=c_d, c_s=c_s, f_s=np.zeros((len(x), 1)), c=c_d + c_s)


def looking_down(center, width=5, height=5, focal=5.0):
    return Camera(focal=focal, width=width, height=height, pose=CameraPose(R=np.eye(3), t=np.asarray(center, dtype=float)))


class TestCamera:
    """Tests for the pinhole camera."""

    def test_principal_point_default(self):
        """Test that the principal point defaults to the image center."""
        camera = looking_down([0, 0, 0], width=8, height=6)
        assert (camera.cx, camera.cy) == (4.0, 3.0)
        assert camera.K[0, 2] == 4.0

    @pytest.mark.parametrize("focal,width", [(0.0, 4), (-1.0, 4), (1.0, 0)])
    def test_invalid_camera(self, focal, width):
        """Test that a non-positive focal length or empty image raises ValueError."""
        with pytest.raises(ValueError):
            Camera(focal=focal, width=width, height=4, pose=CameraPose(R=np.eye(3), t=np.zeros(3)))

    def test_scaled(self):
        """Test that scaling keeps the field of view."""
        camera = looking_down([0, 0, 0], width=8, height=8, focal=10.0).scaled(4, 4)
        assert camera.focal == 5.0
        assert camera.cx == 2.0


class TestRays:
    """Tests for ray generation."""

    def test_center_pixel(self):
        """Test that the center pixel of an unrotated camera looks down -z."""
        rays = generate_rays(looking_down([0.5, 0.5, 2.0]), np.array([[2, 2]]), 1.0, 3.0)
        assert np.allclose(rays.directions[0], [0.0, 0.0, -1.0])
        assert np.array_equal(rays.origins[0], [0.5, 0.5, 2.0])

    def test_image_orientation(self):
        """Test that columns grow along +x and rows grow along -y."""
        rays = generate_rays(looking_down([0, 0, 0]), np.array([[4, 2], [2, 4]]), 1.0, 3.0)
        assert rays.directions[0, 0] > 0.0
        assert rays.directions[1, 1] < 0.0

    def test_unit_directions(self):
        """Test that every direction has unit length."""
        camera = looking_down([0, 0, 0], width=7, height=3)
        rays = generate_rays(camera, all_pixels(7, 3), 1.0, 3.0)
        assert np.allclose(np.linalg.norm(rays.directions, axis=1), 1.0)
        assert rays.pixel_ids.tolist() == list(range(21))

    def test_pixel_order(self):
        """Test that all_pixels is row-major (column, row)."""
        assert all_pixels(3, 2).tolist() == [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]]

    def test_out_of_bounds(self):
        """Test that pixels outside the image raise ValueError."""
        with pytest.raises(ValueError):
            generate_rays(looking_down([0, 0, 0]), np.array([[5, 0]]), 1.0, 3.0)

    def test_stored_correction_applied(self):
        """Test that a stored pure-translation correction moves the origin."""
        camera = looking_down([0.0, 0.0, 0.0])
        camera.pose.correction = np.array([0.0, 0.0, 0.0, 0.1, 0.0, 0.0])
        rays = generate_rays(camera, np.array([[2, 2]]), 1.0, 3.0)
        assert np.allclose(rays.origins[0], [0.1, 0.0, 0.0])

    def test_correction_gradient(self):
        """Test ray gradients with respect to a differentiable correction."""
        camera = looking_down([0.2, -0.1, 1.5])
        xi = ParamBlock(np.random.default_rng(0).normal(scale=0.05, size=6))
        pixels = np.array([[0, 0], [3, 1], [4, 4]])
        weights = np.random.default_rng(1).normal(size=(3, 3))

        def fn():
            rays = generate_rays(camera, pixels, 1.0, 3.0, correction=ad.param(xi))
            return ad.reduce_sum(rays.directions * weights) + ad.reduce_sum(ad.square(rays.origins))

        assert ad.finite_difference_check(fn, xi) < 1e-6

    def test_batch_matches_single_camera(self):
        """Test that batched rays equal per-camera rays."""
        cameras = [looking_down([0.5, 0.5, 2.0]), looking_down([0.1, 0.9, 1.5])]
        corrections = ParamBlock(np.random.default_rng(2).normal(scale=0.02, size=(2, 6)))
        pixels = np.array([[0, 1], [2, 2], [4, 3]])
        ids = np.array([1, 0, 1])
        batch = generate_ray_batch(cameras, corrections, ids, pixels, 1.0, 3.0)
        for row, cam_id in enumerate(ids):
            single = generate_rays(cameras[cam_id], pixels[row:row + 1], 1.0, 3.0, corrections.values[cam_id])
            assert np.allclose(batch.directions.value[row], single.directions[0], atol=1e-12)
            assert np.allclose(batch.origins.value[row], single.origins[0], atol=1e-12)
        assert batch.pixel_ids.tolist() == [5, 12, 19]


class TestSampling:
    """Tests for sample placement along rays."""

    @pytest.fixture
    def x_ray(self):
        return np.array([[0.0, 0.3, 0.3]]), np.array([[1.0, 0.0, 0.0]])

    def test_even_spacing_without_jitter(self, x_ray):
        """Test that samples are evenly spaced from near when no rng is given."""
        samples = sample_rays(*x_ray, 1.0, 2.0, 4)
        assert np.allclose(samples.t[0], [1.0, 1.25, 1.5, 1.75])
        assert np.allclose(samples.delta, 0.25)
        assert np.allclose(samples.t_mid[0], [1.125, 1.375, 1.625])

    def test_stratified_depths(self):
        """Test even depths without rng and one jittered depth per stratum with it."""
        assert np.allclose(stratified_depths(2, 1.0, 2.0, 4, None), np.tile([1.0, 1.25, 1.5, 1.75], (2, 1)))
        t = stratified_depths(30, 1.0, 2.0, 4, np.random.default_rng(2))
        assert t.shape == (30, 4)
        assert np.array_equal(np.floor((t - 1.0) * 4), np.tile(np.arange(4.0), (30, 1)))

    def test_sample_rays_draws_stratified_depths(self, x_ray):
        """Test that sample_rays without a grid returns the stratified depths of the same rng stream."""
        samples = sample_rays(*x_ray, 1.0, 2.0, 6, rng=np.random.default_rng(9))
        assert np.array_equal(samples.t, stratified_depths(1, 1.0, 2.0, 6, np.random.default_rng(9)))

    def test_jitter_stays_in_strata(self):
        """Test that jittered samples stay in their strata and are reproducible."""
        origins = np.zeros((50, 3))
        directions = np.tile([0.0, 0.0, 1.0], (50, 1))
        a = sample_rays(origins, directions, 0.0, 1.0, 8, rng=np.random.default_rng(5))
        b = sample_rays(origins, directions, 0.0, 1.0, 8, rng=np.random.default_rng(5))
        assert np.array_equal(a.t, b.t)
        strata = np.floor(a.t * 8)
        assert np.array_equal(strata, np.tile(np.arange(8.0), (50, 1)))

    def test_all_occupied_grid_is_plain_stratified(self, x_ray):
        """Test that a fully occupied grid does not change the samples."""
        grid = OccupancyGrid(resolution=4)
        assert grid.all_occupied()
        with_grid = sample_rays(*x_ray, 0.0, 1.0, 8, grid=grid)
        without = sample_rays(*x_ray, 0.0, 1.0, 8)
        assert np.array_equal(with_grid.t, without.t)

    def test_skips_empty_half(self, x_ray):
        """Test that samples are spread over the occupied half only."""
        grid = OccupancyGrid(resolution=4)
        i = np.arange(64) % 4
        grid.pred.assign(np.where(i >= 2, 10.0, -10.0))
        samples = sample_rays(*x_ray, 0.0, 1.0, 8, grid=grid)
        assert samples.valid.tolist() == [True]
        assert np.allclose(samples.t[0], 0.5 + np.arange(8) * 0.0625)

    def test_ray_missing_occupied_space(self):
        """Test that a ray through empty cells only is marked invalid."""
        grid = OccupancyGrid(resolution=4)
        grid.set_all(-10.0)
        samples = sample_rays(np.array([[0.0, 0.5, 0.5]]), np.array([[1.0, 0.0, 0.0]]), 0.0, 1.0, 4, grid=grid)
        assert samples.valid.tolist() == [False]
        assert np.allclose(samples.t[0], [0.0, 0.25, 0.5, 0.75])

    @pytest.mark.parametrize("near,far,n", [(1.0, 1.0, 8), (2.0, 1.0, 8), (0.0, 1.0, 1)])
    def test_invalid_arguments(self, x_ray, near, far, n):
        """Test that an empty depth range or a single sample raises ValueError."""
        with pytest.raises(ValueError):
            sample_rays(*x_ray, near, far, n)


class TestComposite:
    """Tests for front-to-back compositing."""

    def test_transparent(self):
        """Test that zero opacity gives a black colour and zero opacity."""
        result = composite(np.zeros((1, 3)), np.ones((1, 3, 3)), np.array([[1.0, 2.0, 3.0]]))
        assert np.array_equal(result.color, np.zeros((1, 3)))
        assert result.opacity[0] == 0.0

    def test_first_opaque(self):
        """Test that an opaque first interval hides everything behind it."""
        colors = np.array([[[0.1, 0.2, 0.3], [1.0, 1.0, 1.0]]])
        result = composite(np.array([[1.0, 0.7]]), colors, np.array([[1.0, 2.0]]))
        assert np.allclose(result.color[0], [0.1, 0.2, 0.3])
        assert result.weights[0, 1] == 0.0
        assert result.depth[0] == pytest.approx(1.0)

    def test_two_half_opaque(self):
        """Test the two-interval example (0.5, 0.5) with red then green."""
        colors = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
        result = composite(np.array([[0.5, 0.5]]), colors, np.array([[1.0, 2.0]]))
        assert np.allclose(result.color[0], [0.5, 0.25, 0.0])
        assert result.opacity[0] == pytest.approx(0.75)

    def test_matches_explicit_products(self):
        """Test weights against a loop over T_i = prod (1 - alpha_j) and the density form."""
        rng = np.random.default_rng(3)
        sigma = rng.uniform(0.0, 5.0, size=(20, 6))
        delta = rng.uniform(0.01, 0.3, size=(20, 6))
        alpha = 1.0 - np.exp(-sigma * delta)
        weights = transmittance_weights(alpha)
        for n in range(20):
            for i in range(6):
                product = np.prod(1.0 - alpha[n, :i]) * alpha[n, i]
                density = np.exp(-np.sum(sigma[n, :i] * delta[n, :i])) * alpha[n, i]
                assert weights[n, i] == pytest.approx(product, abs=1e-12)
                assert weights[n, i] == pytest.approx(density, abs=1e-12)

    def test_weights_bounded(self):
        """Test that weights are non-negative and sum to at most one."""
        alpha = np.random.default_rng(4).uniform(size=(100, 10))
        weights = transmittance_weights(alpha)
        assert weights.min() >= 0.0
        assert np.all(weights.sum(axis=1) <= 1.0 + 1e-12)

    def test_order_matters(self):
        """Test that permuting the intervals changes the colour."""
        colors = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
        forward = composite(np.array([[0.5, 0.9]]), colors, np.array([[1.0, 2.0]]))
        swapped = composite(np.array([[0.9, 0.5]]), colors[:, ::-1], np.array([[1.0, 2.0]]))
        assert not np.allclose(forward.color, swapped.color)

    def test_transmittance_gradient(self):
        """Test the compositing backward pass against central differences."""
        alpha = ParamBlock(np.random.default_rng(5).uniform(0.05, 0.95, size=(3, 5)))
        weights = np.random.default_rng(6).normal(size=(3, 5))

        def fn():
            return ad.reduce_sum(ad.apply(TransmittanceOp(), ad.param(alpha)) * weights)

        assert ad.finite_difference_check(fn, alpha) < 1e-7

    def test_expression_inputs(self):
        """Test that expression inputs give expression outputs with matching values."""
        alpha = np.array([[0.3, 0.6]])
        colors = np.random.default_rng(7).uniform(size=(1, 2, 3))
        numeric = composite(alpha, colors, np.array([[1.0, 2.0]]))
        symbolic = composite(ad.constant(alpha), colors, np.array([[1.0, 2.0]]))
        assert isinstance(symbolic.color, ad.Expr)
        assert np.allclose(symbolic.color.value, numeric.color)


class TestOccupancyGrid:
    """Tests for the occupancy grid."""

    def test_warm_start(self):
        """Test that a fresh grid is fully occupied with targets near one."""
        grid = OccupancyGrid(resolution=4)
        assert grid.all_occupied()
        assert np.allclose(grid.target, 0.999)

    def test_cell_index(self):
        """Test the flat cell index and box test."""
        grid = OccupancyGrid(resolution=4)
        index, inside = grid.cell_index(np.array([[0.1, 0.3, 0.6], [1.0, 1.0, 1.0], [1.2, 0.5, 0.5]]))
        assert index.tolist() == [0 + 4 * (1 + 4 * 2), 63, 3 + 4 * (2 + 4 * 2)]
        assert inside.tolist() == [True, True, False]
        assert np.allclose(grid.cell_centers(np.array([0])), [[0.125, 0.125, 0.125]])

    def test_zero_loss_at_target(self):
        """Test that logits equal to the target logits give zero loss."""
        grid = OccupancyGrid(resolution=2)
        target = grid.target
        grid.pred.assign(np.log(target / (1.0 - target)))
        assert grid_loss(grid, np.arange(8)) == pytest.approx(0.0, abs=1e-20)

    def test_uniform_offset_loss(self):
        """Test that predictions 0.1 above every target give loss 0.01."""
        grid = OccupancyGrid(resolution=2)
        grid.sigma[:] = -np.log(0.5) / grid.delta_ref
        grid.pred.assign(np.full(8, np.log(0.6 / 0.4)))
        assert grid_loss(grid, np.arange(8)) == pytest.approx(0.01)

    def test_targets_follow_observations(self):
        """Test that observed cells take the opacity proxy and others decay."""
        grid = OccupancyGrid(resolution=4, decay=0.5)
        grid.sigma[:] = 2.0
        model = AnalyticSphere(sharpness=30.0)
        point = np.array([[0.75, 0.5, 0.5]])
        targets = occupancy_targets(grid, model, point)
        index = grid.cell_index(point)[0][0]
        assert grid.sigma[index] == pytest.approx(opacity_proxy(np.zeros(1), 30.0)[0])
        assert grid.sigma[0] == 1.0
        assert targets[index] > targets[0]

    def test_update_lowers_loss(self):
        """Test that the logit steps of an update reduce the grid loss."""
        model = AnalyticSphere(sharpness=30.0)
        fitted = OccupancyGrid(resolution=4, steps=4)
        unfitted = OccupancyGrid(resolution=4, steps=0)
        fitted_loss = update_occupancy(fitted, model, np.random.default_rng(0))
        unfitted_loss = update_occupancy(unfitted, model, np.random.default_rng(0))
        assert np.array_equal(fitted.sigma, unfitted.sigma)
        assert fitted_loss < unfitted_loss

    def test_threshold(self):
        """Test that cells below the threshold are not occupied."""
        grid = OccupancyGrid(resolution=2)
        grid.set_all(-10.0)
        assert not grid.occupied(np.array([[0.5, 0.5, 0.5]]))[0]
        assert not grid.all_occupied()


class TestRender:
    """Tests for full renders."""

    def test_empty_scene_is_background(self, tiny_model):
        """Test that a field that is positive everywhere renders the white background."""
        last = tiny_model.geo_mlp
        last.weights[-1].assign(np.zeros(last.weights[-1].shape))
        last.biases[-1].assign(np.full(1, 10.0))
        image, _ = render_image(tiny_model, looking_down([0.5, 0.5, 2.0], width=4, height=3), 1.0, 3.0, n_samples=8)
        assert image.shape == (3, 4, 3)
        assert np.array_equal(image, np.ones((3, 4, 3)))

    def test_analytic_sphere(self):
        """Test colour and depth of a sharp analytic sphere."""
        camera = looking_down([0.5, 0.5, 2.0])
        image, depth = render_image(AnalyticSphere(), camera, 1.0, 2.5, n_samples=256)
        assert np.allclose(image[2, 2], AnalyticSphere.albedo, atol=0.02)
        assert depth[2, 2] == pytest.approx(1.25, abs=0.03)
        assert np.allclose(image[0, 0], 1.0)

    def test_resolution_override(self):
        """Test that an explicit resolution changes the image size."""
        image, depth = render_image(AnalyticSphere(), looking_down([0.5, 0.5, 2.0]), 1.0, 2.5, resolution=(3, 2), n_samples=16)
        assert image.shape == (2, 3, 3)
        assert depth.shape == (2, 3)

    def test_components_add_up(self, tiny_model):
        """Test that over a black background the full render is diffuse plus specular."""
        rays = generate_rays(looking_down([0.5, 0.5, 2.0]), all_pixels(5, 5), 1.0, 3.0)
        args = (tiny_model, rays.origins, rays.directions, 1.0, 3.0)
        kwargs = {"background": (0.0, 0.0, 0.0), "n_samples": 16}
        full, _, _ = render_rays(*args, component="full", **kwargs)
        diffuse, _, _ = render_rays(*args, component="diffuse", **kwargs)
        specular, _, _ = render_rays(*args, component="specular", **kwargs)
        assert np.allclose(full, diffuse + specular)

    def test_unknown_component(self, tiny_model):
        """Test that an unknown component raises ValueError."""
        rays = generate_rays(looking_down([0.5, 0.5, 2.0]), all_pixels(2, 2), 1.0, 3.0)
        with pytest.raises(ValueError):
            render_rays(tiny_model, rays.origins, rays.directions, 1.0, 3.0, component="normals")

    def test_expression_matches_numeric(self, tiny_model):
        """Test that the differentiable render equals the numeric render."""
        rays = generate_rays(looking_down([0.5, 0.5, 2.0]), all_pixels(5, 5), 1.05, 2.45)
        samples = sample_rays(rays.origins, rays.directions, 1.05, 2.45, 16)
        output = render_rays_expr(tiny_model, rays, samples, None, np.ones(3))
        color, depth, _ = render_rays(tiny_model, rays.origins, rays.directions, 1.05, 2.45, n_samples=16)
        assert np.allclose(output.color.value, color)
        assert np.allclose(output.depth.value, depth)

    def test_pose_gradient_through_render(self, tiny_model):
        """Test rendered-colour gradients with respect to the pose corrections."""
        cameras = [looking_down([0.5, 0.5, 2.0]), looking_down([0.45, 0.55, 1.9])]
        corrections = ParamBlock(np.random.default_rng(8).normal(scale=1e-3, size=(2, 6)))
        pixels = np.array([[2, 2], [1, 3], [2, 1], [3, 2]])
        ids = np.array([0, 0, 1, 1])
        weights = np.random.default_rng(9).normal(size=(4, 3))

        def fn():
            rays = generate_ray_batch(cameras, corrections, ids, pixels, 1.05, 2.45)
            samples = sample_rays(rays.origins.value, rays.directions.value, 1.05, 2.45, 8)
            output = render_rays_expr(tiny_model, rays, samples, None, np.ones(3))
            return ad.reduce_sum(output.color * weights)

        assert ad.finite_difference_check(fn, corrections) < 1e-5
