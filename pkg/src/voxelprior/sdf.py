"""Signed-distance-field shape priors on regular lattices.

Grids sample the SDF at voxel centers: cell (i, j, k) is centered at
origin + (i + 1/2, j + 1/2, k + 1/2) * voxel_size. Values are negative
inside the shape. The same lattice convention is shared with the density
grid so a prior converts to a density initialization without resampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import formats

SDFG_MAGIC = b"SDFG"
SDFG_VERSION = 1

#: sharpness of the SDF -> density boundary (smaller = sharper)
DEFAULT_BETA = 0.05


@dataclass
class SdfGrid:
    """Signed-distance samples on a regular lattice, world units."""

    dims: tuple[int, int, int]
    origin: np.ndarray          # (3,) float32, world-space corner
    voxel_size: float           # uniform, > 0, f32-representable
    values: np.ndarray          # (nx, ny, nz) float32

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 2 for d in self.dims):
            raise ValueError(f"dims must be three integers >= 2, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        # Geometry is kept f32-representable so file round-trips are bit-exact.
        self.origin = np.asarray(self.origin, dtype=np.float32).reshape(3)
        self.voxel_size = float(np.float32(self.voxel_size))
        self.values = np.asarray(self.values, dtype=np.float32).reshape(self.dims)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("SDF values must be finite")

    def centers(self) -> np.ndarray:
        """World positions of all voxel centers, shape (nx, ny, nz, 3)."""
        return voxel_centers(self.dims, self.origin, self.voxel_size)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin.astype(np.float64)
        hi = lo + np.array(self.dims, dtype=np.float64) * self.voxel_size
        return lo, hi

    def same_lattice(self, other: "SdfGrid") -> bool:
        return (
            self.dims == other.dims
            and bool(np.array_equal(self.origin, other.origin))
            and self.voxel_size == other.voxel_size
        )

    def copy(self) -> "SdfGrid":
        return replace(self, values=self.values.copy())


def voxel_centers(dims, origin, voxel_size) -> np.ndarray:
    nx, ny, nz = dims
    ax = (np.arange(nx, dtype=np.float64) + 0.5) * voxel_size + float(origin[0])
    ay = (np.arange(ny, dtype=np.float64) + 0.5) * voxel_size + float(origin[1])
    az = (np.arange(nz, dtype=np.float64) + 0.5) * voxel_size + float(origin[2])
    X, Y, Z = np.meshgrid(ax, ay, az, indexing="ij")
    return np.stack([X, Y, Z], axis=-1)


def centered_lattice(dims, extent: float = 2.0):
    """(origin, voxel_size) for a cube of the given edge length centered at 0.

    Assumes cubical dims; the voxel size follows the first axis.
    """
    dims = tuple(int(d) for d in dims)
    voxel_size = float(np.float32(extent / dims[0]))
    origin = np.array([-0.5 * voxel_size * d for d in dims], dtype=np.float32)
    return origin, voxel_size


# ---------------------------------------------------------------------------
# primitives and CSG
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrimitiveSpec:
    """Analytic primitive: sphere, box, or capsule, in world units."""

    kind: str
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.0
    half_extents: tuple[float, float, float] = (0.0, 0.0, 0.0)
    endpoints: tuple[tuple, tuple] = field(
        default=((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    )

    @staticmethod
    def sphere(center=(0.0, 0.0, 0.0), radius=0.5) -> "PrimitiveSpec":
        return PrimitiveSpec(kind="sphere", center=tuple(center), radius=float(radius))

    @staticmethod
    def box(center=(0.0, 0.0, 0.0), half_extents=(0.5, 0.5, 0.5)) -> "PrimitiveSpec":
        return PrimitiveSpec(
            kind="box", center=tuple(center), half_extents=tuple(half_extents)
        )

    @staticmethod
    def capsule(a=(0.0, 0.0, -0.5), b=(0.0, 0.0, 0.5), radius=0.25) -> "PrimitiveSpec":
        return PrimitiveSpec(
            kind="capsule", endpoints=(tuple(a), tuple(b)), radius=float(radius)
        )

    def validate(self) -> None:
        if self.kind in ("sphere", "capsule") and not self.radius > 0:
            raise ValueError(f"{self.kind} radius must be > 0, got {self.radius}")
        if self.kind == "box" and not all(h > 0 for h in self.half_extents):
            raise ValueError(f"box half_extents must be > 0, got {self.half_extents}")
        if self.kind not in ("sphere", "box", "capsule"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")


def primitive_distance(spec: PrimitiveSpec, points: np.ndarray) -> np.ndarray:
    """Exact signed distance of the primitive at points of shape (..., 3)."""
    spec.validate()
    p = np.asarray(points, dtype=np.float64)
    if spec.kind == "sphere":
        c = np.asarray(spec.center, dtype=np.float64)
        return np.linalg.norm(p - c, axis=-1) - spec.radius
    if spec.kind == "box":
        c = np.asarray(spec.center, dtype=np.float64)
        h = np.asarray(spec.half_extents, dtype=np.float64)
        q = np.abs(p - c) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside
    # capsule: distance to segment ab minus radius
    a = np.asarray(spec.endpoints[0], dtype=np.float64)
    b = np.asarray(spec.endpoints[1], dtype=np.float64)
    pa = p - a
    ba = b - a
    denom = float(ba @ ba)
    if denom == 0.0:
        return np.linalg.norm(pa, axis=-1) - spec.radius
    t = np.clip((pa @ ba) / denom, 0.0, 1.0)
    return np.linalg.norm(pa - t[..., None] * ba, axis=-1) - spec.radius


def make_primitive_sdf(spec: PrimitiveSpec, dims, origin, voxel_size) -> SdfGrid:
    """Sample the analytic SDF of a primitive at the lattice voxel centers."""
    grid = SdfGrid(
        dims=tuple(dims),
        origin=origin,
        voxel_size=voxel_size,
        values=np.zeros(tuple(int(d) for d in dims), dtype=np.float32),
    )
    d = primitive_distance(spec, grid.centers())
    grid.values = d.astype(np.float32)
    return grid


_CSG_OPS = {
    "union": lambda a, b: np.minimum(a, b),
    "intersection": lambda a, b: np.maximum(a, b),
    "difference": lambda a, b: np.maximum(a, -b),
}


def csg_combine(a: SdfGrid, b: SdfGrid, op: str) -> SdfGrid:
    """Pointwise CSG of two grids sharing a lattice.

    Union is min, intersection is max, difference is max(a, -b). The result
    is the usual conservative bound, exact away from the cut loci.
    """
    if op not in _CSG_OPS:
        raise ValueError(f"unknown CSG op {op!r}; expected one of {sorted(_CSG_OPS)}")
    if not a.same_lattice(b):
        raise ValueError("csg_combine requires identical dims/origin/voxel_size")
    values = _CSG_OPS[op](
        a.values.astype(np.float64), b.values.astype(np.float64)
    ).astype(np.float32)
    return SdfGrid(dims=a.dims, origin=a.origin, voxel_size=a.voxel_size, values=values)


# ---------------------------------------------------------------------------
# density conversion
# ---------------------------------------------------------------------------

def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(x):
    """Inverse of log(1 + e^x): log(e^x - 1). Maps (0, inf) -> R."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        # x + log(1 - e^-x) is stable for large x; expm1 handles small x.
        return np.where(x > 30.0, x + np.log1p(-np.exp(-np.minimum(x, 700.0))),
                        np.log(np.expm1(np.minimum(x, 30.0))))


def sdf_to_density(sdf: SdfGrid, beta: float = DEFAULT_BETA,
                   bias_b: float = 0.0) -> np.ndarray:
    """Convert an SDF grid into a raw (pre-activation) density grid.

    The activated density sigmoid-profile is sigma(d) = (1/beta) *
    sigmoid(-d / beta), so the zero level set activates to 1/(2*beta) and the
    deep interior approaches 1/beta. The stored raw value subtracts the
    query-time softplus shift bias_b so that softplus(raw + bias_b) recovers
    that profile, and is clamped at 0: far-field voxels keep the transparent
    initialization exactly.
    """
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    d = sdf.values.astype(np.float64)
    sig = (1.0 / beta) * _sigmoid(-d / beta)
    raw = np.maximum(0.0, softplus_inv(sig) - float(bias_b))
    return raw.astype(np.float32)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# SDFG file format
# ---------------------------------------------------------------------------

def save_sdf(grid: SdfGrid, path) -> None:
    """Write the bit-exact SDFG format (see README for the byte layout)."""
    path = Path(path)
    with open(path, "wb") as f:
        formats.write_magic(f, SDFG_MAGIC, SDFG_VERSION)
        _write_grid_block(f, grid)


def load_sdf(path) -> SdfGrid:
    with open(path, "rb") as f:
        formats.read_magic(f, SDFG_MAGIC, SDFG_VERSION)
        return _read_grid_block(f)


def _write_grid_block(f, grid: SdfGrid) -> None:
    formats.write_u32(f, *grid.dims)
    formats.write_f32(f, *[float(v) for v in grid.origin])
    formats.write_f32(f, grid.voxel_size)
    # x-fastest: flat index = i + nx * (j + ny * k)
    formats.write_f32_array(f, grid.values, order="F")


def _read_grid_block(f) -> SdfGrid:
    dims = tuple(formats.read_u32(f) for _ in range(3))
    if any(d < 2 for d in dims) or any(d > 4096 for d in dims):
        raise formats.FormatError(f"implausible grid dims {dims}")
    origin = np.array(formats.read_f32(f, 3), dtype=np.float32)
    voxel_size = formats.read_f32(f)[0]
    values = formats.read_f32_array(f, dims, order="F")
    return SdfGrid(dims=dims, origin=origin, voxel_size=voxel_size, values=values)


def interior_mask(sdf: SdfGrid) -> np.ndarray:
    """Boolean mask of voxels strictly inside the shape (sdf < 0)."""
    return sdf.values < 0
