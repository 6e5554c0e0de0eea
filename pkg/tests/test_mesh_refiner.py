"""
Tests for Stage-2 mesh refinement.

This module tests:
- BVH ray casting against brute force
- The differentiable hit distance
- Subdivision, edge collapse and topology rounds
- The refinement loop and vertex colour baking
"""

from types import SimpleNamespace

import pytest
import numpy as np

import autodiff as ad
from autodiff import ParamBlock
from config import RefineConfig
from mesh import (
    TriangleMesh,
    boundary_edges,
    chamfer_distance,
    edge_face_counts,
    marching_cubes,
    non_manifold_edges,
    sample_field_grid,
    sample_surface,
)
from mesh_refiner import (
    BVH,
    adapt_topology,
    bake_vertex_colors,
    collapse_edges,
    intersection_expr,
    moller_trumbore,
    ray_mesh_intersect,
    refine_mesh,
    subdivide_faces,
)
from renderer import all_pixels, generate_rays
from scene_io import SyntheticSpec, intersect_shape, make_synthetic_scene, sample_shape_surface


def sphere_mesh(radius, resolution):
    return marching_cubes(sample_field_grid(lambda p: np.linalg.norm(p - 0.5, axis=1) - radius, resolution))


def brute_force_hits(positions, faces, origins, directions):
    """Nearest hit per ray by testing every face."""
    best_face = np.full(len(origins), -1)
    best_t = np.full(len(origins), np.inf)
    tri = positions[faces]
    for r in range(len(origins)):
        o = np.repeat(origins[r:r + 1], len(faces), axis=0)
        d = np.repeat(directions[r:r + 1], len(faces), axis=0)
        _, _, t, valid = moller_trumbore(o, d, tri[:, 0], tri[:, 1], tri[:, 2])
        if np.any(valid):
            k = int(np.argmin(np.where(valid, t, np.inf)))
            best_face[r], best_t[r] = k, t[k]
    return best_face, best_t


class PositionColour:
    """Appearance stub whose colour is the hit position itself."""

    def appearance_expr(self, x, v, alpha=None):
        return SimpleNamespace(c=x)


@pytest.fixture
def octahedron():
    vertices = np.array(
        [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]
    )
    faces = []
    for x, sx in ((0, 1), (1, -1)):
        for y, sy in ((2, 1), (3, -1)):
            for z, sz in ((4, 1), (5, -1)):
                faces.append([x, y, z] if sx * sy * sz > 0 else [x, z, y])
    return TriangleMesh(vertices, np.array(faces))


@pytest.fixture
def square():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    return TriangleMesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]))


@pytest.fixture
def triangle_soup():
    rng = np.random.default_rng(4)
    centers = rng.uniform(0.1, 0.9, size=(200, 1, 3))
    positions = (centers + rng.normal(scale=0.05, size=(200, 3, 3))).reshape(-1, 3)
    return positions, np.arange(600).reshape(200, 3)


@pytest.fixture
def soup_rays():
    rng = np.random.default_rng(5)
    origins = rng.uniform(-1.0, 2.0, size=(300, 3))
    targets = rng.uniform(0.2, 0.8, size=(300, 3))
    directions = targets - origins
    return origins, directions / np.linalg.norm(directions, axis=1, keepdims=True)


class TestRayCasting:
    """Tests for BVH traversal and nearest hits."""

    def test_matches_brute_force(self, triangle_soup, soup_rays):
        """Test that BVH hits equal testing every face."""
        positions, faces = triangle_soup
        origins, directions = soup_rays
        hits = ray_mesh_intersect(positions, faces, origins, directions)
        face, t = brute_force_hits(positions, faces, origins, directions)
        assert np.any(hits.hit)
        assert np.array_equal(hits.face, face)
        assert np.allclose(hits.t[hits.hit], t[hits.hit])
        assert np.all(np.isinf(hits.t[~hits.hit]))

    def test_refit_after_motion(self, triangle_soup, soup_rays):
        """Test that a refitted BVH equals one built on the moved vertices."""
        positions, faces = triangle_soup
        origins, directions = soup_rays
        bvh = BVH(positions, faces)
        moved = positions + np.random.default_rng(6).normal(scale=0.03, size=positions.shape)
        bvh.refit(moved)
        refitted = ray_mesh_intersect(moved, faces, origins, directions, bvh)
        face, _ = brute_force_hits(moved, faces, origins, directions)
        assert np.array_equal(refitted.face, face)

    def test_barycentric_reconstructs_hit(self, square):
        """Test that barycentric weights of the hit face give the hit point."""
        origins = np.array([[0.3, 0.6, 1.0], [0.8, 0.1, 1.0]])
        directions = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]])
        hits = ray_mesh_intersect(square.vertices, square.faces, origins, directions)
        assert hits.face.tolist() == [1, 0]
        assert np.allclose(hits.t, 1.0)
        for r in range(2):
            corners = square.vertices[square.faces[hits.face[r]]]
            assert np.allclose(hits.barycentric[r] @ corners, origins[r] + directions[r])

    def test_misses(self, square):
        """Test rays pointing away or passing beside the mesh."""
        origins = np.array([[0.5, 0.5, 1.0], [2.0, 2.0, 1.0], [0.5, 0.5, 1.0]])
        directions = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        hits = ray_mesh_intersect(square.vertices, square.faces, origins, directions)
        assert hits.face.tolist() == [-1, -1, -1]
        assert np.all(np.isinf(hits.t))

    def test_empty_mesh(self):
        """Test that an empty mesh misses every ray."""
        hits = ray_mesh_intersect(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((2, 3)), np.ones((2, 3)))
        assert not np.any(hits.hit)


class TestIntersectionExpr:
    """Tests for the differentiable hit distance."""

    def test_matches_numeric_hits(self, triangle_soup, soup_rays):
        """Test that the expression reproduces the numeric distances and weights."""
        positions, faces = triangle_soup
        origins, directions = soup_rays
        hits = ray_mesh_intersect(positions, faces, origins, directions)
        hit = hits.hit
        t, weights = intersection_expr(positions, faces, hits.face[hit], origins[hit], directions[hit])
        assert np.allclose(t.value, hits.t[hit])
        assert np.allclose(weights.value, hits.barycentric[hit])

    def test_vertex_gradient(self, triangle_soup, soup_rays):
        """Test the gradient of hit distances with respect to the vertices."""
        positions, faces = triangle_soup
        origins, directions = soup_rays
        hits = ray_mesh_intersect(positions, faces, origins, directions)
        hit = hits.hit
        block = ParamBlock(positions.copy(), name="positions")

        def fn():
            t, _ = intersection_expr(ad.param(block), faces, hits.face[hit], origins[hit], directions[hit])
            return ad.reduce_sum(t)

        touched = np.unique(faces[hits.face[hit]].reshape(-1))
        indices = (touched[:, None] * 3 + np.arange(3)).reshape(-1)[:30]
        assert ad.finite_difference_check(fn, block, step=1e-7, indices=indices) < 1e-5

    def test_moving_the_plane(self, square):
        """Test that lifting the square by 0.1 shortens a vertical hit by 0.1."""
        origins = np.array([[0.3, 0.6, 1.0]])
        directions = np.array([[0.0, 0.0, -1.0]])
        lifted = square.vertices + [0.0, 0.0, 0.1]
        t, _ = intersection_expr(lifted, square.faces, np.array([1]), origins, directions)
        assert t.value[0] == pytest.approx(0.9)


class TestTopology:
    """Tests for subdivision and edge collapse."""

    def test_subdivide_without_t_junctions(self, square):
        """Test that splitting one face also splits the neighbour sharing the edge."""
        result = subdivide_faces(square, np.array([0]))
        assert result.n_vertices == 7
        assert result.n_faces == 6
        assert np.sum(result.face_areas()) == pytest.approx(1.0)
        assert len(boundary_edges(result.faces)) == 6
        assert len(non_manifold_edges(result.faces)) == 0

    def test_subdivide_closed_mesh(self, octahedron):
        """Test that subdividing every face keeps a closed surface."""
        result = subdivide_faces(octahedron, np.arange(8))
        assert result.n_faces == 32
        assert result.n_vertices == 18
        assert len(boundary_edges(result.faces)) == 0

    def test_subdivide_interpolates_colours(self, square):
        """Test that midpoints get the mean colour of their edge."""
        square.colors = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        result = subdivide_faces(square, np.array([0]))
        assert result.colors.shape == (7, 3)
        assert np.allclose(result.colors[4], [0.5, 0.5, 0.5])

    def test_collapse_octahedron_edge(self, octahedron):
        """Test that one collapse leaves a closed 5-vertex, 6-face surface."""
        result = collapse_edges(octahedron, np.array([0]))
        assert result.n_vertices == 5
        assert result.n_faces == 6
        assert len(boundary_edges(result.faces)) == 0
        assert len(non_manifold_edges(result.faces)) == 0
        edges, _ = edge_face_counts(result.faces)
        assert result.n_vertices - len(edges) + result.n_faces == 2

    def test_collapse_respects_minimum(self, octahedron):
        """Test that no collapse happens when it would leave fewer faces than allowed."""
        result = collapse_edges(octahedron, np.array([0]), min_faces=7)
        assert result.n_faces == 8

    def test_adapt_keeps_surface_closed(self):
        """Test that a topology round on a closed mesh keeps it closed and manifold."""
        mesh = sphere_mesh(0.3, 12)
        error = np.arange(mesh.n_faces, dtype=np.float64)
        config = RefineConfig(subdivide_quantile=0.1, decimate_quantile=0.3)
        result = adapt_topology(mesh, error, config)
        assert result.n_faces != mesh.n_faces
        assert len(boundary_edges(result.faces)) == 0
        assert len(non_manifold_edges(result.faces)) == 0

    def test_adapt_without_observations(self, octahedron):
        """Test that faces never hit leave the mesh unchanged."""
        result = adapt_topology(octahedron, np.full(8, np.nan), RefineConfig())
        assert result is octahedron


@pytest.fixture
def refine_scene(temp_dir):
    """A 32x32 sphere scene whose images show the hit position as colour."""
    spec = SyntheticSpec(shape="sphere", albedo="constant", n_views=8, n_test=0, size=32, seed=0)
    scene = make_synthetic_scene(spec, temp_dir / "refine")
    shape = scene.metadata["synthetic"]
    images = []
    for camera in scene.cameras:
        rays = generate_rays(camera, all_pixels(camera.width, camera.height), scene.near, scene.far)
        t, _ = intersect_shape(shape, rays.origins, rays.directions)
        hit = np.isfinite(t)
        points = rays.origins + np.where(hit, t, 0.0)[:, None] * rays.directions
        colour = np.where(hit[:, None], np.clip(points, 0.0, 1.0), 1.0)
        images.append(colour.reshape(camera.height, camera.width, 3))
    return scene, images


class TestRefineMesh:
    """Tests for the refinement loop."""

    def test_runs_with_topology_round(self, refine_scene, tiny_refine_config):
        """Test the loss log and a topology edit during a short run."""
        scene, images = refine_scene
        mesh = sphere_mesh(0.28, 16)
        result = refine_mesh(mesh, scene.cameras, images, PositionColour(), tiny_refine_config, scene.near, scene.far)
        assert [row[0] for row in result.history] == [1, 2, 3, 4]
        assert all(np.isfinite(row[1]) for row in result.history)
        assert not result.reverted
        assert len(boundary_edges(result.mesh.faces)) == 0
        assert np.array_equal(result.mesh.offsets, np.zeros_like(result.mesh.vertices))

    def test_empty_mesh(self, refine_scene):
        """Test that an empty mesh is returned unchanged."""
        scene, images = refine_scene
        empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
        result = refine_mesh(empty, scene.cameras, images, PositionColour())
        assert result.mesh.is_empty
        assert result.history == []

    def test_camera_image_mismatch(self, refine_scene):
        """Test that mismatched cameras and images raise ValueError."""
        scene, images = refine_scene
        with pytest.raises(ValueError):
            refine_mesh(sphere_mesh(0.28, 8), scene.cameras, images[:-1], PositionColour())

    def test_non_finite_reverts(self, refine_scene):
        """Test that a non-finite loss returns the last topology snapshot."""
        scene, images = refine_scene

        class Broken:
            def appearance_expr(self, x, v, alpha=None):
                return SimpleNamespace(c=x * np.nan)

        mesh = sphere_mesh(0.28, 8)
        config = RefineConfig(iterations=3, rays_per_batch=256)
        result = refine_mesh(mesh, scene.cameras, images, Broken(), config, scene.near, scene.far)
        assert result.reverted
        assert np.array_equal(result.mesh.vertices, mesh.vertices)
        assert np.array_equal(result.mesh.faces, mesh.faces)

    def test_background_targets_leave_mesh_unchanged(self, refine_scene):
        """Test that hits on background pixels shade but never move vertices, even with regularizers on."""
        scene, images = refine_scene
        blank = [np.ones_like(image) for image in images]
        mesh = sphere_mesh(0.28, 12)
        config = RefineConfig(iterations=5, rays_per_batch=256, lambda_smooth=1.0, lambda_offset=1.0, topology_rounds=0)
        result = refine_mesh(mesh, scene.cameras, blank, PositionColour(), config, scene.near, scene.far)
        assert result.history[-1][2] > 0.0
        assert np.array_equal(result.mesh.vertices, mesh.vertices)

    @pytest.mark.slow
    def test_noisy_sphere_chamfer_halves(self, refine_scene):
        """Test that refining a sphere with 0.01 vertex noise at least halves its chamfer to the true surface."""
        scene, images = refine_scene
        truth = sample_shape_surface(scene.metadata["synthetic"], 50000, np.random.default_rng(7))
        clean = sphere_mesh(0.25, 24)
        noise = np.random.default_rng(3).normal(0.0, 0.01, clean.vertices.shape)
        noisy = TriangleMesh(clean.vertices + noise, clean.faces)
        config = RefineConfig(
            iterations=200,
            rays_per_batch=1024,
            lr=2e-3,
            lr_end=2e-5,
            lambda_offset=0.0,
            topology_rounds=0,
            log_every=50,
        )
        result = refine_mesh(noisy, scene.cameras, images, PositionColour(), config, scene.near, scene.far)
        before = chamfer_distance(sample_surface(noisy, 50000, np.random.default_rng(8)), truth)
        after = chamfer_distance(sample_surface(result.mesh, 50000, np.random.default_rng(8)), truth)
        assert not result.reverted
        assert before / after >= 2.0


class TestBakeVertexColors:
    """Tests for storing field colours on vertices."""

    def test_colours_and_features(self, square, tiny_model):
        """Test that baked colours equal the diffuse colour and features are optional."""
        square.vertices = square.vertices * 0.5 + 0.25
        baked = bake_vertex_colors(square, tiny_model)
        colors, _ = tiny_model.diffuse(square.positions)
        assert np.allclose(baked.colors, colors)
        assert baked.features is None
        with_features = bake_vertex_colors(square, tiny_model, with_features=True)
        assert with_features.features.shape == (4, tiny_model.config.spec_features)

    def test_offsets_folded(self, square, tiny_model):
        """Test that baking folds offsets into the vertices."""
        square.offsets = np.full((4, 3), 0.1)
        baked = bake_vertex_colors(square, tiny_model)
        assert np.allclose(baked.vertices, square.positions)
        assert np.array_equal(baked.offsets, np.zeros((4, 3)))
