"""
Shared pytest fixtures for posemesh tests.

This module provides temporary directories, tiny network/grid configurations
that keep tests fast, and a small analytic scene written to disk.
"""

import pytest
import tempfile
import shutil
from pathlib import Path

import numpy as np

from config import RefineConfig, TrainConfig
from field import FieldConfig, FieldModel
from hashgrid import GridConfig
from scene_io import SyntheticSpec, make_synthetic_scene


@pytest.fixture
def temp_dir():
    """Create a temporary directory that is cleaned up after the test."""
    tmp = Path(tempfile.mkdtemp())
    yield tmp
    # On Windows, files may still be locked by the process
    # Use ignore_errors to prevent test failures during cleanup
    shutil.rmtree(tmp, ignore_errors=True)


@pytest.fixture
def output_dir(temp_dir):
    """Create a temporary output directory for generated files."""
    out_dir = temp_dir / "output"
    out_dir.mkdir()
    return out_dir


@pytest.fixture
def tiny_grid_config():
    """Two levels: a dense 2^3 level and a hashed 4^3 level."""
    return GridConfig(levels=2, n_min=2, n_max=4, table_size=2 ** 6, features=2, init_range=1e-2)


@pytest.fixture
def tiny_field_config(tiny_grid_config):
    """Small networks on top of the tiny grids."""
    return FieldConfig(
        geo_hidden=8,
        geo_layers=1,
        diffuse_hidden=8,
        diffuse_layers=1,
        specular_hidden=4,
        specular_layers=1,
        spec_features=2,
        geo_grid=tiny_grid_config,
        app_grid=GridConfig(**vars(tiny_grid_config)),
    )


@pytest.fixture
def tiny_model(tiny_field_config):
    """A freshly initialized field with tiny settings."""
    return FieldModel(tiny_field_config, np.random.default_rng(0))


@pytest.fixture
def tiny_train_config(tiny_field_config):
    """A Stage-1 configuration that trains in well under a second per step."""
    return TrainConfig(
        iterations=6,
        rays_per_batch=16,
        eikonal_samples=8,
        n_samples=8,
        noise_sigma=0.02,
        occupancy_resolution=4,
        occupancy_every=2,
        log_every=2,
        checkpoint_every=0,
        field=tiny_field_config,
    )


@pytest.fixture
def tiny_refine_config():
    """A short Stage-2 configuration."""
    return RefineConfig(iterations=4, rays_per_batch=32, topology_every=2, topology_rounds=1, log_every=2)


@pytest.fixture
def synthetic_spec():
    """Four training views and one test view of a 16x16 sphere."""
    return SyntheticSpec(shape="sphere", albedo="checker", n_views=4, n_test=1, size=16, seed=0)


@pytest.fixture
def synthetic_scene(temp_dir, synthetic_spec):
    """The synthetic spec rendered to disk and loaded back."""
    return make_synthetic_scene(synthetic_spec, temp_dir / "scene")
