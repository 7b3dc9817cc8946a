"""The optimizable scene: raw density voxel grid plus a shallow color MLP.

Density queries are "post-activation": the raw grid is trilinearly
interpolated first and the shifted softplus sigma = log(1 + exp(raw + b))
is applied to the interpolated value. Color is position-only: an MLP over a
sin/cos positional encoding of grid-normalized coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats, nets, seeding
from .sdf import (
    SdfGrid,
    sdf_to_density,
    softplus_inv,
    _read_grid_block,
    _write_grid_block,
)

VFLD_MAGIC = b"VFLD"
VFLD_VERSION = 1

DEFAULT_ALPHA_INIT = 1e-6


@dataclass
class FieldConfig:
    encoding_levels: int = 4
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0


@dataclass
class VoxelField:
    """Raw density grid + color MLP + shared softplus shift."""

    dims: tuple[int, int, int]
    origin: np.ndarray        # (3,) float32
    voxel_size: float         # f32-representable
    density: np.ndarray       # (nx, ny, nz) float32, raw (pre-activation)
    color_mlp: nets.MlpParams
    bias_b: float
    encoding_levels: int = 4
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=np.float32).reshape(3)
        self.voxel_size = float(np.float32(self.voxel_size))
        self.density = np.asarray(self.density, dtype=np.float32).reshape(self.dims)
        self.bias_b = float(self.bias_b)
        if not np.isfinite(self.bias_b):
            raise ValueError("bias_b must be finite")
        if not np.all(np.isfinite(self.density)):
            raise ValueError("density values must be finite")
        expected_in = 3 + 6 * self.encoding_levels
        if self.color_mlp.in_dim != expected_in:
            raise ValueError(
                f"color MLP input width {self.color_mlp.in_dim} != "
                f"3 + 6L = {expected_in}"
            )

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin.astype(np.float64)
        hi = lo + np.array(self.dims, dtype=np.float64) * self.voxel_size
        return lo, hi

    @property
    def bounding_radius(self) -> float:
        lo, hi = self.bbox
        center = 0.5 * (lo + hi)
        return float(np.linalg.norm(hi - center))

    def normalize_points(self, points: np.ndarray) -> np.ndarray:
        """Map world points into [-1, 1]^3 over the grid bounding box."""
        lo, hi = self.bbox
        p = np.asarray(points, dtype=np.float64)
        return 2.0 * (p - lo) / (hi - lo) - 1.0

    def param_arrays(self) -> list:
        """All optimizable arrays: [density, W0, b0, ...]; views."""
        return [self.density] + self.color_mlp.param_arrays()

    def copy(self) -> "VoxelField":
        return VoxelField(
            dims=self.dims,
            origin=self.origin.copy(),
            voxel_size=self.voxel_size,
            density=self.density.copy(),
            color_mlp=self.color_mlp.copy(),
            bias_b=self.bias_b,
            encoding_levels=self.encoding_levels,
            seed=self.seed,
        )


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def positional_encoding(x: np.ndarray, levels: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < levels, componentwise.

    Expects coordinates already normalized to the encoding domain; output
    width is 3 + 6 * levels.
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if levels == 0:
        return x.copy()
    parts = [x]
    for k in range(levels):
        ang = (2.0**k) * np.pi * x
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=-1)


def positional_encoding_backward(x: np.ndarray, levels: int,
                                 d_enc: np.ndarray) -> np.ndarray:
    """Adjoint of positional_encoding with respect to x (same layout)."""
    x = np.asarray(x, dtype=np.float64)
    d_enc = np.asarray(d_enc, dtype=np.float64)
    d = d_enc[..., :3].copy()
    for k in range(levels):
        ang = (2.0**k) * np.pi * x
        scale = (2.0**k) * np.pi
        s_adj = d_enc[..., 3 + 6 * k: 6 + 6 * k]
        c_adj = d_enc[..., 6 + 6 * k: 9 + 6 * k]
        d += scale * (np.cos(ang) * s_adj - np.sin(ang) * c_adj)
    return d


# ---------------------------------------------------------------------------
# trilinear interpolation on the raw grid
# ---------------------------------------------------------------------------

def trilinear(grid: np.ndarray, dims, origin, voxel_size, points: np.ndarray):
    """Interpolate raw values at world points; zero outside the node hull.

    Returns (values, flat_corner_indices (n, 8), corner_weights (n, 8)) with
    weights zeroed for outside points, so scattering with them is a no-op.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = dims
    n = np.array([nx, ny, nz], dtype=np.float64)
    u = (p - np.asarray(origin, dtype=np.float64)) / float(voxel_size) - 0.5
    inside = np.all((u >= 0.0) & (u <= n - 1.0), axis=1)

    i0 = np.clip(np.floor(u), 0, n - 2.0).astype(np.int64)
    f = u - i0
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    # corner order: (0,0,0),(1,0,0),(0,1,0),(1,1,0),(0,0,1),(1,0,1),(0,1,1),(1,1,1)
    w = np.stack(
        [
            gx * gy * gz, fx * gy * gz, gx * fy * gz, fx * fy * gz,
            gx * gy * fz, fx * gy * fz, gx * fy * fz, fx * fy * fz,
        ],
        axis=1,
    )
    w[~inside] = 0.0

    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    stride_y, stride_z = nz, 1  # flat index for C-ordered (nx, ny, nz)
    base = (ix * ny + iy) * nz + iz
    offs = np.array(
        [0, ny * nz, stride_y, ny * nz + stride_y,
         stride_z, ny * nz + stride_z, stride_y + stride_z,
         ny * nz + stride_y + stride_z],
        dtype=np.int64,
    )
    idx = base[:, None] + offs[None, :]
    idx[~inside] = 0

    flat = np.asarray(grid, dtype=np.float64).ravel()
    values = (flat[idx] * w).sum(axis=1)
    return values, idx, w


def query_raw(field: VoxelField, points: np.ndarray) -> np.ndarray:
    vals, _, _ = trilinear(
        field.density, field.dims, field.origin, field.voxel_size, points
    )
    return vals.reshape(np.asarray(points, dtype=np.float64).shape[:-1])


def query_density(field: VoxelField, points: np.ndarray) -> np.ndarray:
    """Activated density sigma = softplus(raw + b), >= 0, defined everywhere."""
    raw = query_raw(field, points)
    return np.logaddexp(0.0, raw + field.bias_b)


def query_density_spatial_grad(field: VoxelField, points: np.ndarray) -> np.ndarray:
    """Analytic d(sigma)/dx inside cells (undefined on cell boundaries)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = field.dims
    n = np.array([nx, ny, nz], dtype=np.float64)
    h = field.voxel_size
    u = (p - field.origin.astype(np.float64)) / h - 0.5
    inside = np.all((u >= 0.0) & (u <= n - 1.0), axis=1)
    i0 = np.clip(np.floor(u), 0, n - 2.0).astype(np.int64)
    f = u - i0

    V = field.density.astype(np.float64)
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]

    def corner(dx, dy, dz):
        return V[ix + dx, iy + dy, iz + dz]

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c = {k: corner(*k) for k in
         [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0),
          (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)]}
    raw = (
        c[(0, 0, 0)] * gx * gy * gz + c[(1, 0, 0)] * fx * gy * gz
        + c[(0, 1, 0)] * gx * fy * gz + c[(1, 1, 0)] * fx * fy * gz
        + c[(0, 0, 1)] * gx * gy * fz + c[(1, 0, 1)] * fx * gy * fz
        + c[(0, 1, 1)] * gx * fy * fz + c[(1, 1, 1)] * fx * fy * fz
    )
    d_fx = (
        (c[(1, 0, 0)] - c[(0, 0, 0)]) * gy * gz
        + (c[(1, 1, 0)] - c[(0, 1, 0)]) * fy * gz
        + (c[(1, 0, 1)] - c[(0, 0, 1)]) * gy * fz
        + (c[(1, 1, 1)] - c[(0, 1, 1)]) * fy * fz
    )
    d_fy = (
        (c[(0, 1, 0)] - c[(0, 0, 0)]) * gx * gz
        + (c[(1, 1, 0)] - c[(1, 0, 0)]) * fx * gz
        + (c[(0, 1, 1)] - c[(0, 0, 1)]) * gx * fz
        + (c[(1, 1, 1)] - c[(1, 0, 1)]) * fx * fz
    )
    d_fz = (
        (c[(0, 0, 1)] - c[(0, 0, 0)]) * gx * gy
        + (c[(1, 0, 1)] - c[(1, 0, 0)]) * fx * gy
        + (c[(0, 1, 1)] - c[(0, 1, 0)]) * gx * fy
        + (c[(1, 1, 1)] - c[(1, 1, 0)]) * fx * fy
    )
    d_raw = np.stack([d_fx, d_fy, d_fz], axis=1) / h
    d_raw[~inside] = 0.0
    sig = _sigmoid(raw + field.bias_b)
    grad = sig[:, None] * d_raw
    grad[~inside] = 0.0
    return grad.reshape(np.asarray(points, dtype=np.float64).shape)


def query_color(field: VoxelField, points: np.ndarray) -> np.ndarray:
    """RGB in [0,1]^3 from the color MLP on encoded positions."""
    enc = positional_encoding(field.normalize_points(points), field.encoding_levels)
    return nets.forward(field.color_mlp, enc)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def transparent_bias(alpha_init: float, s: float) -> float:
    """Softplus shift b with 1 - exp(-softplus(b) * s) = alpha_init exactly.

    b = log((1 - alpha_init)^(-1/s) - 1), evaluated via the algebraically
    equivalent softplus_inv(-log1p(-alpha_init) / s) for stability at tiny
    alpha_init.
    """
    if not 0.0 < alpha_init < 1.0:
        raise ValueError(f"alpha_init must be in (0, 1), got {alpha_init}")
    if not s > 0:
        raise ValueError(f"s must be > 0, got {s}")
    return float(softplus_inv(-np.log1p(-alpha_init) / s))


def init_transparent(dims, origin, voxel_size,
                     alpha_init: float = DEFAULT_ALPHA_INIT,
                     s: float | None = None,
                     config: FieldConfig | None = None) -> VoxelField:
    """All-zero raw grid; per-voxel-step opacity equals alpha_init."""
    config = config or FieldConfig()
    dims = tuple(int(d) for d in dims)
    voxel_size = float(np.float32(voxel_size))
    if s is None:
        s = voxel_size
    b = transparent_bias(alpha_init, s)
    mlp = _init_color_mlp(config)
    return VoxelField(
        dims=dims,
        origin=origin,
        voxel_size=voxel_size,
        density=np.zeros(dims, dtype=np.float32),
        color_mlp=mlp,
        bias_b=b,
        encoding_levels=config.encoding_levels,
        seed=config.seed,
    )


def init_from_prior(sdf: SdfGrid, beta: float = 0.05,
                    alpha_init: float = DEFAULT_ALPHA_INIT,
                    config: FieldConfig | None = None) -> VoxelField:
    """Density grid from an SDF prior; far-field voxels stay transparent."""
    config = config or FieldConfig()
    b = transparent_bias(alpha_init, sdf.voxel_size)
    density = sdf_to_density(sdf, beta=beta, bias_b=b)
    mlp = _init_color_mlp(config)
    return VoxelField(
        dims=sdf.dims,
        origin=sdf.origin,
        voxel_size=sdf.voxel_size,
        density=density,
        color_mlp=mlp,
        bias_b=b,
        encoding_levels=config.encoding_levels,
        seed=config.seed,
    )


def _init_color_mlp(config: FieldConfig) -> nets.MlpParams:
    in_dim = 3 + 6 * config.encoding_levels
    sizes = (in_dim, *config.hidden, 3)
    rng = seeding.stream(config.seed, "mlp_init")
    return nets.glorot_init(sizes, rng, output_activation="sigmoid")


# ---------------------------------------------------------------------------
# VFLD checkpoint format
# ---------------------------------------------------------------------------

def save_field(fld: VoxelField, path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        formats.write_magic(f, VFLD_MAGIC, VFLD_VERSION)
        formats.write_magic(f, b"SDFG", 1)
        _write_grid_block(f, _grid_shim(fld))
        nets.write_mlp(f, fld.color_mlp)
        formats.write_f64(f, fld.bias_b)
        formats.write_u32(f, fld.encoding_levels)
        formats.write_u64(f, fld.seed)


def load_field(path) -> VoxelField:
    with open(path, "rb") as f:
        formats.read_magic(f, VFLD_MAGIC, VFLD_VERSION)
        formats.read_magic(f, b"SDFG", 1)
        grid = _read_grid_block(f)
        mlp = nets.read_mlp(f, output_activation="sigmoid")
        bias_b = formats.read_f64(f)[0]
        levels = formats.read_u32(f)
        seed = formats.read_u64(f)
    return VoxelField(
        dims=grid.dims,
        origin=grid.origin,
        voxel_size=grid.voxel_size,
        density=grid.values,
        color_mlp=mlp,
        bias_b=bias_b,
        encoding_levels=levels,
        seed=seed,
    )


def _grid_shim(fld: VoxelField) -> SdfGrid:
    # The raw density block reuses the SDFG layout; values are densities here.
    shim = SdfGrid.__new__(SdfGrid)
    shim.dims = fld.dims
    shim.origin = fld.origin
    shim.voxel_size = fld.voxel_size
    shim.values = fld.density
    return shim
