"""Classical TSDF fusion over the dense vertex grid.

Per-vertex projective signed distance with unit-weight running average,
truncation band [-tr, +tr]; vertices farther than tr behind the observed
surface are left untouched.  Unobserved vertices read +tr (free space).
"""

import struct

import numpy as np

from .geometry import BoundingBox, GridDims, project, world_to_grid
from .grid import trilinear_stencil

MAGIC = b"TSDF"
VERSION = 1


class TsdfVolume:
    def __init__(self, dims, bounds, gs, tr):
        self.dims = dims
        self.bounds = bounds
        self.gs = float(gs)
        self.tr = float(tr)
        self.sdf = np.full(dims.shape, self.tr)
        self.weight = np.zeros(dims.shape)

    def vertex_positions(self):
        ii, jj, kk = np.meshgrid(np.arange(self.dims.nx), np.arange(self.dims.ny),
                                 np.arange(self.dims.nz), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.bounds.min_corner + idx * self.gs


def integrate_frame(vol, depth, pose, intr):
    """Fuse one depth frame into the volume (in place; returns vol)."""
    if depth.shape != (intr.height, intr.width):
        raise ValueError("depth image does not match intrinsics size")
    pts = vol.vertex_positions()
    u, v, z = project(pts, intr, pose)
    infront = z > 0
    ui = np.round(np.where(infront, u, -1.0)).astype(np.int64)
    vi = np.round(np.where(infront, v, -1.0)).astype(np.int64)
    ok = infront & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    d_pix = np.zeros(pts.shape[0])
    d_pix[ok] = depth[vi[ok], ui[ok]]
    ok &= d_pix > 0
    raw = d_pix - z
    ok &= raw >= -vol.tr
    upd = np.clip(raw[ok], -vol.tr, vol.tr)

    flat_sdf = vol.sdf.reshape(-1)
    flat_w = vol.weight.reshape(-1)
    idx = np.nonzero(ok)[0]
    w_old = flat_w[idx]
    # vertices with weight 0 hold the +tr default, which must not bias the mean
    old = np.where(w_old > 0, flat_sdf[idx], 0.0)
    flat_sdf[idx] = (old * w_old + upd) / (w_old + 1.0)
    flat_w[idx] = w_old + 1.0
    return vol


def run_fusion(frames, bounds, dims, gs, tr):
    """Fold integrate_frame over all frames of the set."""
    if len(frames) == 0:
        raise ValueError("empty frame set")
    vol = TsdfVolume(dims, bounds, gs, tr)
    for frame in frames:
        integrate_frame(vol, frame.depth, frame.pose, frames.intrinsics)
    return vol


def query_tsdf(vol, p):
    """Trilinear SDF at world points p; observed iff all 8 corners were seen.

    Out-of-bounds points return (+tr, False).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    g, contained = world_to_grid(p, vol.bounds, vol.gs)
    corners, w, _ = trilinear_stencil(g, vol.dims)
    sv = vol.sdf[corners[:, :, 0], corners[:, :, 1], corners[:, :, 2]]
    wv = vol.weight[corners[:, :, 0], corners[:, :, 1], corners[:, :, 2]]
    val = (sv * w).sum(axis=1)
    obs = np.all(wv > 0, axis=1) & contained
    val = np.where(contained, val, vol.tr)
    return val, obs


def save_volume(path, vol):
    """Little-endian dump: magic, version, dims, bounds, gs, tr, sdf, weights.

    sdf/weights stored as f32 row-major with x fastest.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<3I", vol.dims.nx, vol.dims.ny, vol.dims.nz))
        fh.write(struct.pack("<6d", *vol.bounds.min_corner, *vol.bounds.max_corner))
        fh.write(struct.pack("<2d", vol.gs, vol.tr))
        for arr in (vol.sdf, vol.weight):
            fh.write(np.ascontiguousarray(
                arr.transpose(2, 1, 0).astype("<f4")).tobytes())


def load_volume(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a TSDF volume file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        nx, ny, nz = struct.unpack("<3I", fh.read(12))
        b = struct.unpack("<6d", fh.read(48))
        gs, tr = struct.unpack("<2d", fh.read(16))
        dims = GridDims(nx, ny, nz)
        vol = TsdfVolume(dims, BoundingBox(np.array(b[:3]), np.array(b[3:])), gs, tr)
        n = dims.n_vertices
        for name in ("sdf", "weight"):
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
            setattr(vol, name, data.reshape(nz, ny, nx).transpose(2, 1, 0).copy())
        return vol
