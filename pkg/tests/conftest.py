import numpy as np
import pytest

from voxelprior import field, rendering, sdf


@pytest.fixture
def sphere_prior_16():
    dims = (16, 16, 16)
    origin, h = sdf.centered_lattice(dims)
    return sdf.make_primitive_sdf(sdf.PrimitiveSpec.sphere(radius=0.5),
                                  dims, origin, h)


@pytest.fixture
def small_field(sphere_prior_16):
    return field.init_from_prior(sphere_prior_16)


@pytest.fixture
def tiny_render(small_field):
    cam = rendering.camera_at(30.0, 25.0, 3.0, resolution=(8, 8))
    settings = rendering.settings_for_field(small_field, cam,
                                            samples_per_ray=24)
    out = rendering.render(small_field, cam, settings)
    return small_field, cam, settings, out


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
