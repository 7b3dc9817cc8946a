"""Differentiable voxel radiance fields with SDF shape priors.

Submodules: sdf (grids, primitives, CSG), field (voxel + color-MLP model),
rendering (differentiable compositing), guidance (photometric / remote),
losses, optim (Adam loop + checkpoints), diffusion (embedding-space DDPM),
meshing (marching cubes, OBJ), cli.
"""

__version__ = "0.1.0"

from .field import (VoxelField, init_from_prior, init_transparent,  # noqa: F401
                    load_field, save_field, transparent_bias)
from .sdf import (PrimitiveSpec, SdfGrid, centered_lattice,  # noqa: F401
                  csg_combine, load_sdf, make_primitive_sdf, save_sdf,
                  sdf_to_density)
