"""Dense per-vertex feature grid with trilinear read, gradient scatter and
one-step subdivision to half the cell size."""

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox, GridDims, grid_dims, world_to_grid


class OutOfBoundsError(ValueError):
    """Query point outside the grid bounding box."""


class GridMemoryError(MemoryError):
    """Subdivision would exceed the configured memory cap."""


def trilinear_stencil(g, dims):
    """Corner indices and weights for continuous grid coords g (N, 3).

    Returns (corners (N, 8, 3) int, weights (N, 8), dw_dg (N, 8, 3)).
    Coords are clamped into [0, cells] per axis, so callers must reject
    out-of-range points themselves if that matters.
    """
    g = np.asarray(g, dtype=np.float64)
    cells = np.array(dims.cells, dtype=np.float64)
    g = np.clip(g, 0.0, cells)
    base = np.minimum(np.floor(g), cells - 1).astype(np.int64)
    f = g - base  # fractional position in the cell, in [0, 1]

    # corner offsets in a fixed order: bit k of c selects axis k's +1 side
    offs = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)],
                    dtype=np.int64)  # (8, 3)
    corners = base[:, None, :] + offs[None, :, :]

    # per-axis factors and their derivatives wrt g
    fa = np.where(offs[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
    dfa = np.where(offs[None, :, :] == 1, 1.0, -1.0)
    w = fa[:, :, 0] * fa[:, :, 1] * fa[:, :, 2]
    dw = np.empty(fa.shape)
    dw[:, :, 0] = dfa[:, :, 0] * fa[:, :, 1] * fa[:, :, 2]
    dw[:, :, 1] = fa[:, :, 0] * dfa[:, :, 1] * fa[:, :, 2]
    dw[:, :, 2] = fa[:, :, 0] * fa[:, :, 1] * dfa[:, :, 2]
    return corners, w, dw


def interp_scalar(values, g, dims):
    """Trilinear interpolation of a scalar vertex field at grid coords g."""
    corners, w, _ = trilinear_stencil(np.atleast_2d(g), dims)
    v = values[corners[:, :, 0], corners[:, :, 1], corners[:, :, 2]]
    return (v * w).sum(axis=1)


@dataclass
class Stencil:
    """Result of a trilinear read, kept for the backward pass."""

    corners: np.ndarray   # (N, 8, 3)
    weights: np.ndarray   # (N, 8)
    dw_dg: np.ndarray     # (N, 8, 3), wrt continuous grid coords


class FeatureGrid:
    """Learnable F-vector per grid vertex; zero-initialized."""

    def __init__(self, bounds, gs, F, dims=None):
        self.bounds = bounds
        self.gs = float(gs)
        self.F = int(F)
        self.dims = dims if dims is not None else grid_dims(bounds, gs)
        shape = self.dims.shape + (self.F,)
        self.features = np.zeros(shape)
        self.grads = np.zeros(shape)

    def zero_grads(self):
        self.grads[...] = 0.0

    def interpolate(self, p):
        """Features at world points p (N, 3); raises if any point is outside.

        The grid spans ceil(L/gs) cells per axis, which can overhang the
        bounding box by up to one cell, so containment is tested in grid
        coordinates rather than against the box itself.
        """
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        g, _ = world_to_grid(p, self.bounds, self.gs)
        cells = np.array(self.dims.cells, dtype=np.float64)
        if np.any(g < 0.0) or np.any(g > cells):
            raise OutOfBoundsError("interpolation query outside grid bounds")
        corners, w, dw = trilinear_stencil(g, self.dims)
        feats = self._gather(corners)
        out = np.einsum("ncf,nc->nf", feats, w)
        return out, Stencil(corners, w, dw)

    def _gather(self, corners):
        return self.features[corners[:, :, 0], corners[:, :, 1], corners[:, :, 2]]

    def interpolate_backward(self, stencil, upstream):
        """Scatter upstream (N, F) into the grad accumulators."""
        upstream = np.atleast_2d(upstream)
        contrib = stencil.weights[:, :, None] * upstream[:, None, :]
        c = stencil.corners.reshape(-1, 3)
        np.add.at(self.grads, (c[:, 0], c[:, 1], c[:, 2]),
                  contrib.reshape(-1, upstream.shape[-1]))

    def position_gradient(self, stencil, upstream):
        """dL/dp (N, 3) in world units, given dL/dfeature = upstream (N, F)."""
        feats = self._gather(stencil.corners)           # (N, 8, F)
        s = np.einsum("nf,ncf->nc", np.atleast_2d(upstream), feats)
        return np.einsum("nc,nca->na", s, stencil.dw_dg) / self.gs

    def subdivide(self, max_bytes=None):
        """New grid at half the cell size; features transferred trilinearly."""
        new_gs = self.gs / 2.0
        # exactly double the cell count so the fine grid covers the same
        # span as the coarse one (which may overhang the bounding box)
        cx, cy, cz = self.dims.cells
        new_dims = GridDims(2 * cx + 1, 2 * cy + 1, 2 * cz + 1)
        n_bytes = 2 * new_dims.n_vertices * self.F * 8
        if max_bytes is not None and n_bytes > max_bytes:
            raise GridMemoryError(
                f"subdivided grid needs {n_bytes} bytes > cap {max_bytes}")
        out = FeatureGrid(self.bounds, new_gs, self.F, dims=new_dims)
        ii, jj, kk = np.meshgrid(np.arange(new_dims.nx), np.arange(new_dims.ny),
                                 np.arange(new_dims.nz), indexing="ij")
        g_new = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) * 0.5
        corners, w, _ = trilinear_stencil(g_new, self.dims)
        feats = self._gather(corners)
        out.features = np.einsum("ncf,nc->nf", feats, w).reshape(
            new_dims.shape + (self.F,))
        return out
