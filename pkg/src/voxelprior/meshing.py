"""Isosurface extraction from scalar lattices and optimized fields.

Classic marching cubes (256-case table, linear edge interpolation) via
scikit-image, with exact vertex de-duplication so closed level sets come out
watertight. Density fields are resampled to an opacity lattice first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes as _skimage_mc

from .field import VoxelField, query_density
from .sdf import SdfGrid, voxel_centers

DEFAULT_MESH_RESOLUTION = 64
DEFAULT_OPACITY_ISO = 0.5


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (n, 3) float64, world units
    triangles: np.ndarray  # (m, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) and not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle indices out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def edge_counts(self) -> dict:
        """Undirected edge -> number of incident triangles."""
        counts: dict = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(min(a, b)), int(max(a, b)))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        return all(c == 2 for c in self.edge_counts().values())


def marching_cubes(grid: SdfGrid, iso: float) -> TriangleMesh:
    """Extract the iso level set; vertices in world coordinates.

    All-on-one-side inputs (including flat fields) give an empty mesh.
    """
    values = np.asarray(grid.values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if not lo < iso < hi:
        return TriangleMesh(vertices=np.zeros((0, 3)),
                            triangles=np.zeros((0, 3), dtype=np.int64))
    h = grid.voxel_size
    verts, faces, _normals, _vals = _skimage_mc(
        values, level=float(iso), spacing=(h, h, h), method="lorensen"
    )
    # index coordinates -> world: sample (i, j, k) lives at the voxel center
    # origin + (i + 1/2) h, not at the cell corner
    verts = verts.astype(np.float64) \
        + np.asarray(grid.origin, dtype=np.float64) + 0.5 * h
    verts, faces = _dedup_vertices(verts, faces.astype(np.int64))
    return TriangleMesh(vertices=verts, triangles=faces)


def _dedup_vertices(verts: np.ndarray, faces: np.ndarray):
    """Merge byte-identical vertices so shared edges are shared indices."""
    if len(verts) == 0:
        return verts, faces
    uniq, inverse = np.unique(verts, axis=0, return_inverse=True)
    return uniq, inverse[faces]


def field_to_opacity_grid(fld: VoxelField, dims) -> SdfGrid:
    """Resample a field onto a dims lattice of per-voxel opacities.

    Opacity = 1 - exp(-sigma * h) with h the resample spacing (one-voxel path
    length), so values land in [0, 1] regardless of density scale.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 2 for d in dims):
        raise ValueError(f"dims must be >= 2 per axis, got {dims}")
    lo, hi = fld.bbox
    extents = (hi - lo) / np.asarray(dims, dtype=np.float64)
    h = float(extents[0])
    if not np.allclose(extents, h, rtol=1e-6):
        raise ValueError(
            "field bbox is anisotropic relative to dims; opacity resampling "
            "needs a uniform spacing"
        )
    h = float(np.float32(h))
    origin = lo.astype(np.float32)
    centers = voxel_centers(dims, origin, h).reshape(-1, 3)
    sigma = query_density(fld, centers).reshape(dims)
    opacity = -np.expm1(-sigma * h)
    return SdfGrid(dims=dims, origin=origin, voxel_size=h,
                   values=opacity.astype(np.float32))


# ---------------------------------------------------------------------------
# OBJ export
# ---------------------------------------------------------------------------

def write_obj(path, mesh: TriangleMesh) -> None:
    """ASCII OBJ: v/f records, 1-based indices, LF endings, 6 significant digits."""
    with open(path, "w", newline="\n") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6g} {v[1]:.6g} {v[2]:.6g}\n")
        for tri in mesh.triangles:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        triangles=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )
