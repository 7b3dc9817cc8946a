import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelprior import field as fieldmod
from voxelprior import formats
from voxelprior.field import (
    FieldConfig,
    VoxelField,
    init_from_prior,
    init_transparent,
    load_field,
    positional_encoding,
    positional_encoding_backward,
    query_color,
    query_density,
    query_density_spatial_grad,
    query_raw,
    save_field,
    transparent_bias,
    trilinear,
)
from voxelprior.sdf import centered_lattice, interior_mask

from oracles import softplus_ref, trilinear_ref


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def test_encoding_width_and_identity_slot():
    x = np.random.default_rng(0).uniform(-1, 1, size=(5, 3))
    for L in range(5):
        enc = positional_encoding(x, L)
        assert enc.shape == (5, 3 + 6 * L)
        np.testing.assert_array_equal(enc[:, :3], x)


def test_encoding_values_at_zero():
    enc = positional_encoding(np.zeros(3), 2)
    want = np.concatenate([np.zeros(3), np.zeros(3), np.ones(3),
                           np.zeros(3), np.ones(3)])
    np.testing.assert_allclose(enc, want, atol=1e-15)


def test_encoding_matches_manual():
    x = np.array([0.3, -0.5, 0.9])
    enc = positional_encoding(x, 3)
    for k in range(3):
        s = enc[3 + 6 * k: 6 + 6 * k]
        c = enc[6 + 6 * k: 9 + 6 * k]
        np.testing.assert_allclose(s, np.sin((2.0 ** k) * np.pi * x), rtol=1e-15)
        np.testing.assert_allclose(c, np.cos((2.0 ** k) * np.pi * x), rtol=1e-15)


def test_encoding_backward_matches_fd():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(4, 3))
    d_enc = rng.normal(size=(4, 3 + 6 * 3))
    grad = positional_encoding_backward(x, 3, d_enc)
    h = 1e-7
    for row in range(4):
        for k in range(3):
            xp, xm = x.copy(), x.copy()
            xp[row, k] += h
            xm[row, k] -= h
            fd = np.sum((positional_encoding(xp, 3) - positional_encoding(xm, 3))
                        * d_enc) / (2 * h)
            assert fd == pytest.approx(grad[row, k], rel=1e-6, abs=1e-8)


def test_encoding_rejects_negative_levels():
    with pytest.raises(ValueError):
        positional_encoding(np.zeros(3), -1)


# ---------------------------------------------------------------------------
# trilinear interpolation
# ---------------------------------------------------------------------------

def _lattice_grid(dims=(6, 5, 4), seed=0):
    # geometry chosen exactly representable in binary so voxel centers land
    # exactly on the node lattice
    rng = np.random.default_rng(seed)
    grid = rng.normal(size=dims).astype(np.float32)
    origin = np.array([-0.75, -0.625, -0.5])
    return grid, dims, origin, 0.25


def test_trilinear_matches_scalar_reference():
    grid, dims, origin, h = _lattice_grid()
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.8, 0.8, size=(64, 3))
    vals, _, _ = trilinear(grid, dims, origin, h, pts)
    for p, v in zip(pts, vals):
        want = trilinear_ref(grid.astype(np.float64), origin, h, p)
        assert v == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_trilinear_exact_at_voxel_centers():
    grid, dims, origin, h = _lattice_grid()
    centers = np.stack(np.meshgrid(
        *[(np.arange(d) + 0.5) * h + origin[k] for k, d in enumerate(dims)],
        indexing="ij"), axis=-1).reshape(-1, 3)
    vals, _, _ = trilinear(grid, dims, origin, h, centers)
    np.testing.assert_allclose(vals, grid.astype(np.float64).ravel(), atol=1e-9)


def test_trilinear_zero_outside_hull():
    grid, dims, origin, h = _lattice_grid()
    far = np.array([[10.0, 0.0, 0.0], [0.0, -10.0, 0.0], [0.0, 0.0, 99.0]])
    vals, idx, w = trilinear(grid, dims, origin, h, far)
    np.testing.assert_array_equal(vals, 0.0)
    np.testing.assert_array_equal(w, 0.0)
    # indices are parked at 0 so scattering stays in-bounds
    assert idx.min() >= 0 and idx.max() < np.prod(dims)


def test_trilinear_weights_sum_to_one_inside():
    grid, dims, origin, h = _lattice_grid()
    pts = np.random.default_rng(2).uniform(-0.3, 0.3, size=(32, 3))
    _, _, w = trilinear(grid, dims, origin, h, pts)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_trilinear_reproduces_affine_fields():
    # interpolation is exact for functions linear in each coordinate
    dims = (6, 6, 6)
    origin = np.array([-0.6, -0.6, -0.6])
    h = 0.2
    coeff = np.array([0.7, -1.3, 0.4])
    centers = np.stack(np.meshgrid(
        *[(np.arange(d) + 0.5) * h + origin[k] for k, d in enumerate(dims)],
        indexing="ij"), axis=-1)
    grid = (centers @ coeff + 0.25).astype(np.float64)
    pts = np.random.default_rng(3).uniform(-0.35, 0.35, size=(40, 3))
    vals, _, _ = trilinear(grid, dims, origin, h, pts)
    np.testing.assert_allclose(vals, pts @ coeff + 0.25, atol=1e-12)


def test_trilinear_gradient_is_scatter_of_weights():
    # the value is linear in the grid: v = sum_c w_c g[idx_c], so scattering
    # the weights must reproduce d(v)/d(grid) exactly
    grid, dims, origin, h = _lattice_grid()
    p = np.array([[0.07, -0.12, 0.03]])
    _, idx, w = trilinear(grid, dims, origin, h, p)
    eps = 1e-3
    for c in range(8):
        g2 = grid.astype(np.float64).copy().ravel()
        g2[idx[0, c]] += eps
        v2, _, _ = trilinear(g2.reshape(dims), dims, origin, h, p)
        v1, _, _ = trilinear(grid, dims, origin, h, p)
        assert (v2[0] - v1[0]) / eps == pytest.approx(w[0, c], abs=1e-9)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_trilinear_linear_in_grid(seed):
    rng = np.random.default_rng(seed)
    dims = (4, 4, 4)
    g1 = rng.normal(size=dims)
    g2 = rng.normal(size=dims)
    origin = np.array([-0.4, -0.4, -0.4])
    pts = rng.uniform(-0.35, 0.35, size=(8, 3))
    v1, _, _ = trilinear(g1, dims, origin, 0.2, pts)
    v2, _, _ = trilinear(g2, dims, origin, 0.2, pts)
    v12, _, _ = trilinear(g1 + 3.0 * g2, dims, origin, 0.2, pts)
    np.testing.assert_allclose(v12, v1 + 3.0 * v2, rtol=1e-10, atol=1e-10)


# ---------------------------------------------------------------------------
# field queries
# ---------------------------------------------------------------------------

def test_query_density_is_softplus_of_raw(small_field):
    pts = np.random.default_rng(4).uniform(-0.8, 0.8, size=(16, 3))
    raw = query_raw(small_field, pts)
    sig = query_density(small_field, pts)
    want = np.array([softplus_ref(float(r) + small_field.bias_b) for r in raw])
    np.testing.assert_allclose(sig, want, rtol=1e-12)
    assert np.all(sig > 0)


def test_query_density_outside_equals_background_level(small_field):
    # outside the node hull raw interpolates to 0, so sigma = softplus(b)
    sig = query_density(small_field, np.array([[5.0, 5.0, 5.0]]))
    assert sig[0] == pytest.approx(softplus_ref(small_field.bias_b), rel=1e-12)


def test_query_density_spatial_grad_matches_fd(small_field):
    # probe at cell centers plus a small interior offset so the central
    # difference never crosses a cell face
    rng = np.random.default_rng(5)
    base = rng.uniform(-0.6, 0.6, size=(12, 3))
    h_cell = small_field.voxel_size
    # snap into the interior of a cell
    u = np.floor((base - small_field.origin.astype(np.float64)) / h_cell - 0.5)
    pts = (u + 0.5 + rng.uniform(0.25, 0.45, size=(12, 3))) * h_cell \
        + small_field.origin.astype(np.float64) + 0.0
    grad = query_density_spatial_grad(small_field, pts)
    h = 1e-6
    for i in range(len(pts)):
        for k in range(3):
            pp, pm = pts[i].copy(), pts[i].copy()
            pp[k] += h
            pm[k] -= h
            fd = (query_density(small_field, pp[None])
                  - query_density(small_field, pm[None]))[0] / (2 * h)
            assert fd == pytest.approx(grad[i, k], rel=2e-4, abs=1e-7)


def test_query_color_shape_and_range(small_field):
    pts = np.random.default_rng(6).uniform(-1, 1, size=(4, 5, 3))
    rgb = query_color(small_field, pts)
    assert rgb.shape == (4, 5, 3)
    assert np.all((rgb > 0) & (rgb < 1))


def test_normalize_points_maps_bbox_to_unit_cube(small_field):
    lo, hi = small_field.bbox
    np.testing.assert_allclose(small_field.normalize_points(lo), -1.0, atol=1e-12)
    np.testing.assert_allclose(small_field.normalize_points(hi), 1.0, atol=1e-12)
    mid = 0.5 * (lo + hi)
    np.testing.assert_allclose(small_field.normalize_points(mid), 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def test_transparent_bias_exact_identity():
    for alpha, s in [(1e-6, 0.125), (1e-4, 0.05), (0.01, 1.0), (1e-8, 0.02)]:
        b = transparent_bias(alpha, s)
        achieved = -np.expm1(-softplus_ref(b) * s)
        assert achieved == pytest.approx(alpha, rel=1e-12)


def test_transparent_bias_validation():
    with pytest.raises(ValueError, match="alpha_init"):
        transparent_bias(0.0, 0.1)
    with pytest.raises(ValueError, match="alpha_init"):
        transparent_bias(1.0, 0.1)
    with pytest.raises(ValueError, match="s must"):
        transparent_bias(1e-6, 0.0)


def test_init_transparent_opacity(small_field):
    origin, h = centered_lattice((8, 8, 8))
    fld = init_transparent((8, 8, 8), origin, h, alpha_init=1e-6)
    assert np.all(fld.density == 0)
    sigma = query_density(fld, np.zeros((1, 3)))[0]
    alpha = -np.expm1(-sigma * h)
    assert alpha == pytest.approx(1e-6, rel=1e-9)


def test_init_transparent_deterministic():
    origin, h = centered_lattice((4, 4, 4))
    a = init_transparent((4, 4, 4), origin, h, config=FieldConfig(seed=12))
    b = init_transparent((4, 4, 4), origin, h, config=FieldConfig(seed=12))
    c = init_transparent((4, 4, 4), origin, h, config=FieldConfig(seed=13))
    for x, y in zip(a.param_arrays(), b.param_arrays()):
        assert np.array_equal(x, y)
    assert not np.array_equal(a.color_mlp.weights[0], c.color_mlp.weights[0])


def test_init_from_prior_surface_and_far_field(sphere_prior_16):
    fld = init_from_prior(sphere_prior_16, beta=0.05)
    sdf = sphere_prior_16.values.astype(np.float64)
    sigma = np.logaddexp(0.0, fld.density.astype(np.float64) + fld.bias_b)
    # near-surface voxels are close to 1/(2 beta) = 10
    near = np.abs(sdf) < 0.01
    if near.any():
        np.testing.assert_allclose(sigma[near], 10.0, rtol=0.25)
    # interior exceeds surface density
    assert sigma[sdf < -0.2].min() > 15.0
    # voxels whose profile density falls below the transparent floor clamp
    # to raw = 0 and keep the exact alpha_init opacity
    floor = softplus_ref(fld.bias_b)
    profile = (1.0 / 0.05) / (1.0 + np.exp(sdf / 0.05))
    far = profile < 0.99 * floor
    assert far.any()
    np.testing.assert_array_equal(fld.density[far], 0.0)
    alpha_far = -np.expm1(-sigma[far] * fld.voxel_size)
    np.testing.assert_allclose(alpha_far, 1e-6, rtol=1e-6)


def test_init_from_prior_interior_monotone(sphere_prior_16):
    fld = init_from_prior(sphere_prior_16, beta=0.05)
    mask = interior_mask(sphere_prior_16)
    assert fld.density[mask].min() > fld.density[~mask].max() - 1e-6


def test_field_validation(sphere_prior_16):
    fld = init_from_prior(sphere_prior_16)
    with pytest.raises(ValueError, match="MLP input width"):
        VoxelField(dims=fld.dims, origin=fld.origin, voxel_size=fld.voxel_size,
                   density=fld.density, color_mlp=fld.color_mlp, bias_b=fld.bias_b,
                   encoding_levels=7)
    bad = fld.density.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(ValueError, match="finite"):
        VoxelField(dims=fld.dims, origin=fld.origin, voxel_size=fld.voxel_size,
                   density=bad, color_mlp=fld.color_mlp, bias_b=fld.bias_b)


def test_bounding_radius(small_field):
    lo, hi = small_field.bbox
    want = 0.5 * float(np.linalg.norm(hi - lo))
    assert small_field.bounding_radius == pytest.approx(want)


# ---------------------------------------------------------------------------
# VFLD round-trip
# ---------------------------------------------------------------------------

def test_save_load_field_bit_exact(tmp_path, small_field):
    small_field.density[3, 4, 5] = np.float32(1.2345678)
    path = tmp_path / "field.vfld"
    save_field(small_field, path)
    back = load_field(path)
    assert back.dims == small_field.dims
    assert np.array_equal(back.origin, small_field.origin)
    assert back.voxel_size == small_field.voxel_size
    assert np.array_equal(back.density, small_field.density)
    assert back.bias_b == small_field.bias_b  # f64, bit-exact
    assert back.encoding_levels == small_field.encoding_levels
    assert back.seed == small_field.seed
    for a, b in zip(back.color_mlp.param_arrays(),
                    small_field.color_mlp.param_arrays()):
        assert np.array_equal(a, b)
    # identical fields render identical densities
    pts = np.random.default_rng(7).uniform(-1, 1, size=(10, 3))
    np.testing.assert_array_equal(query_density(back, pts),
                                  query_density(small_field, pts))


def test_load_field_rejects_sdf_file(tmp_path, sphere_prior_16):
    from voxelprior.sdf import save_sdf
    path = tmp_path / "prior.sdfg"
    save_sdf(sphere_prior_16, path)
    with pytest.raises(formats.FormatError, match="magic"):
        load_field(path)


def test_vfld_magic(tmp_path, small_field):
    path = tmp_path / "field.vfld"
    save_field(small_field, path)
    assert path.read_bytes()[:4] == b"VFLD"
