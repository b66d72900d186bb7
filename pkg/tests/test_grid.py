"""Feature grid: trilinear read, gradient scatter, position gradients and
subdivision.  Gradient checks use central finite differences."""

import numpy as np
import pytest

from gridsurf.geometry import BoundingBox, GridDims
from gridsurf.grid import (FeatureGrid, GridMemoryError, OutOfBoundsError,
                           interp_scalar, trilinear_stencil)


def make_grid(rng, gs=0.5, F=4):
    box = BoundingBox([0.0, 0.0, 0.0], [2.0, 1.5, 1.0])
    grid = FeatureGrid(box, gs, F)
    grid.features = rng.normal(size=grid.features.shape)
    return grid


def trilinear_oracle(values, g):
    """Literal 8-corner interpolation of a scalar vertex field."""
    base = np.floor(g).astype(int)
    base = np.minimum(base, np.array(values.shape) - 2)
    f = g - base
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0])
                     * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                out += w * values[base[0] + dx, base[1] + dy, base[2] + dz]
    return out


def test_stencil_weights_partition_of_unity(rng):
    dims = GridDims(4, 3, 5)
    g = rng.uniform(0, 2, size=(40, 3))
    _, w, _ = trilinear_stencil(g, dims)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(w >= 0)


def test_interp_scalar_matches_oracle(rng):
    dims = GridDims(4, 3, 5)
    values = rng.normal(size=dims.shape)
    g = rng.uniform(0, [2.999, 1.999, 3.999], size=(30, 3))
    got = interp_scalar(values, g, dims)
    want = [trilinear_oracle(values, gi) for gi in g]
    assert np.allclose(got, want, atol=1e-12)


def test_stencil_weight_gradient_finite_difference(rng):
    dims = GridDims(4, 3, 5)
    g = rng.uniform(0.1, 1.9, size=(10, 3))
    _, w, dw = trilinear_stencil(g, dims)
    h = 1e-7
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        _, wp, _ = trilinear_stencil(g + e, dims)
        _, wm, _ = trilinear_stencil(g - e, dims)
        assert np.allclose((wp - wm) / (2 * h), dw[:, :, a], atol=1e-6)


def test_interpolate_exact_at_vertices(rng):
    grid = make_grid(rng)
    idx = np.array([[0, 0, 0], [2, 1, 1], [4, 3, 2]])
    p = grid.bounds.min_corner + idx * grid.gs
    out, _ = grid.interpolate(p)
    assert np.allclose(out, grid.features[idx[:, 0], idx[:, 1], idx[:, 2]],
                       atol=1e-12)


def test_interpolate_exact_for_trilinear_field(rng):
    # a field of the form a + bx + cy + dz + exy + ... + hxyz is
    # reproduced exactly by trilinear interpolation
    grid = make_grid(rng, F=1)
    coef = rng.normal(size=8)

    def field(p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        return (coef[0] + coef[1] * x + coef[2] * y + coef[3] * z
                + coef[4] * x * y + coef[5] * y * z + coef[6] * x * z
                + coef[7] * x * y * z)

    verts = grid.bounds.min_corner + np.stack(
        np.meshgrid(*[np.arange(n) for n in grid.dims.shape],
                    indexing="ij"), axis=-1) * grid.gs
    grid.features[..., 0] = field(verts)
    p = rng.uniform(grid.bounds.min_corner, grid.bounds.max_corner,
                    size=(100, 3))
    out, _ = grid.interpolate(p)
    assert np.allclose(out[:, 0], field(p), atol=1e-10)


def test_interpolate_rejects_outside_points(rng):
    grid = make_grid(rng)
    with pytest.raises(OutOfBoundsError):
        grid.interpolate(np.array([[-0.1, 0.5, 0.5]]))


def test_interpolate_accepts_grid_overhang():
    # a 1.05-extent axis gets 3 cells of 0.5: the grid reaches 1.5, past
    # the bounding box, and queries in the overhang must still work
    box = BoundingBox([0.0, 0.0, 0.0], [1.05, 1.05, 1.05])
    grid = FeatureGrid(box, 0.5, 2)
    out, _ = grid.interpolate(np.array([[1.3, 1.0, 1.0]]))
    assert out.shape == (1, 2)


def test_interpolate_backward_matches_finite_difference(rng):
    grid = make_grid(rng, gs=0.5, F=2)
    p = rng.uniform(grid.bounds.min_corner + 0.01,
                    grid.bounds.max_corner - 0.01, size=(5, 3))
    upstream = rng.normal(size=(5, 2))

    def loss():
        out, _ = grid.interpolate(p)
        return (out * upstream).sum()

    _, stencil = grid.interpolate(p)
    grid.zero_grads()
    grid.interpolate_backward(stencil, upstream)

    h = 1e-6
    flat = grid.features.reshape(-1)
    gflat = grid.grads.reshape(-1)
    hot = np.nonzero(np.abs(gflat) > 1e-12)[0]
    for i in hot[:: max(1, len(hot) // 20)]:
        flat[i] += h
        lp = loss()
        flat[i] -= 2 * h
        lm = loss()
        flat[i] += h
        assert (lp - lm) / (2 * h) == pytest.approx(gflat[i], rel=1e-6)


def test_position_gradient_matches_finite_difference(rng):
    grid = make_grid(rng, gs=0.5, F=3)
    p = rng.uniform(grid.bounds.min_corner + 0.05,
                    grid.bounds.max_corner - 0.05, size=(8, 3))
    upstream = rng.normal(size=(8, 3))
    _, stencil = grid.interpolate(p)
    dp = grid.position_gradient(stencil, upstream)

    h = 1e-7
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        op, _ = grid.interpolate(p + e)
        om, _ = grid.interpolate(p - e)
        fd = ((op - om) * upstream).sum(axis=1) / (2 * h)
        assert np.allclose(fd, dp[:, a], atol=1e-5)


def test_subdivide_halves_cell_and_preserves_field(rng):
    grid = make_grid(rng, gs=0.5, F=3)
    fine = grid.subdivide()
    assert fine.gs == pytest.approx(0.25)
    assert fine.dims.cells == tuple(2 * c for c in grid.dims.cells)
    p = rng.uniform(grid.bounds.min_corner, grid.bounds.max_corner,
                    size=(500, 3))
    a, _ = grid.interpolate(p)
    b, _ = fine.interpolate(p)
    # a trilinear field restricted to a half cell is still trilinear, so
    # the transfer is exact up to floating point
    assert np.max(np.abs(a - b)) < 1e-12


def test_subdivide_memory_cap(rng):
    grid = make_grid(rng)
    with pytest.raises(GridMemoryError):
        grid.subdivide(max_bytes=100)


def test_zero_grads(rng):
    grid = make_grid(rng)
    grid.grads[...] = 1.0
    grid.zero_grads()
    assert not grid.grads.any()
