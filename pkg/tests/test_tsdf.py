"""Depth-map fusion against a literal per-vertex projection oracle, plus
volume query semantics and the binary file format."""

import numpy as np
import pytest

from gridsurf.geometry import (BoundingBox, Frame, FrameSet, Intrinsics, Pose,
                               grid_dims, project)
from gridsurf.tsdf import (TsdfVolume, integrate_frame, load_volume,
                           query_tsdf, run_fusion, save_volume)


def fusion_oracle(frames, intr, bounds, dims, gs, tr):
    """Brute-force fusion: per-vertex loops, nearest-pixel depth lookup,
    unit-weight running average, band clamped to [-tr, tr]."""
    sdf = np.full(dims.shape, tr)
    weight = np.zeros(dims.shape)
    for frame in frames:
        for i in range(dims.nx):
            for j in range(dims.ny):
                for k in range(dims.nz):
                    p = bounds.min_corner + np.array([i, j, k]) * gs
                    u, v, z = project(p, intr, frame.pose)
                    if z <= 0:
                        continue
                    ui = int(round(float(u)))
                    vi = int(round(float(v)))
                    if not (0 <= ui < intr.width and 0 <= vi < intr.height):
                        continue
                    d = frame.depth[vi, ui]
                    if d <= 0:
                        continue
                    raw = d - z
                    if raw < -tr:
                        continue
                    upd = min(max(raw, -tr), tr)
                    w = weight[i, j, k]
                    old = sdf[i, j, k] if w > 0 else 0.0
                    sdf[i, j, k] = (old * w + upd) / (w + 1.0)
                    weight[i, j, k] = w + 1.0
    return sdf, weight


def small_setup(frames, gs=0.25, tr=0.1, margin=0.2):
    from gridsurf.geometry import compute_scene_bounds
    bounds = compute_scene_bounds(frames, margin)
    dims = grid_dims(bounds, gs)
    return bounds, dims


def test_fusion_matches_per_vertex_oracle_exactly(box_frames):
    # coarse grid keeps the O(frames * vertices) oracle affordable
    sub = FrameSet(list(box_frames)[:3], box_frames.intrinsics)
    bounds, dims = small_setup(sub, gs=0.4)
    vol = run_fusion(sub, bounds, dims, 0.4, 0.1)
    sdf, weight = fusion_oracle(sub, sub.intrinsics, bounds, dims, 0.4, 0.1)
    assert np.array_equal(vol.weight, weight)
    assert np.allclose(vol.sdf, sdf, atol=1e-13)


def test_unobserved_vertices_read_truncation(box_frames):
    sub = FrameSet(list(box_frames)[:1], box_frames.intrinsics)
    bounds, dims = small_setup(sub, gs=0.4)
    vol = run_fusion(sub, bounds, dims, 0.4, 0.1)
    never = vol.weight == 0
    assert never.any()
    assert np.all(vol.sdf[never] == 0.1)


def test_repeated_frame_keeps_sdf_increments_weight(box_frames):
    sub = FrameSet(list(box_frames)[:1], box_frames.intrinsics)
    bounds, dims = small_setup(sub, gs=0.4)
    vol = run_fusion(sub, bounds, dims, 0.4, 0.1)
    before = vol.sdf.copy()
    integrate_frame(vol, sub[0].depth, sub[0].pose, sub.intrinsics)
    assert np.allclose(vol.sdf, before, atol=1e-13)
    assert np.all(vol.weight[vol.weight > 0] >= 1.0)


def test_vertex_far_behind_surface_untouched():
    # single pixel at depth 1 m; a vertex 2 m deep along the same ray is
    # more than tr behind the surface and must keep its free-space default
    intr = Intrinsics(10.0, 10.0, 1.0, 1.0, 3, 3)
    depth = np.zeros((3, 3))
    depth[1, 1] = 1.0
    bounds = BoundingBox([-0.5, -0.5, -2.5], [0.5, 0.5, 0.5])
    dims = grid_dims(bounds, 0.5)
    vol = TsdfVolume(dims, bounds, 0.5, 0.1)
    integrate_frame(vol, depth, Pose.identity(), intr)
    # vertex at (0, 0, -2): z-depth 2, raw = 1 - 2 = -1 < -tr
    i = int(round((0 - bounds.min_corner[0]) / 0.5))
    k = int(round((-2 - bounds.min_corner[2]) / 0.5))
    assert vol.weight[i, i, k] == 0
    assert vol.sdf[i, i, k] == 0.1
    # vertex at (0, 0, -1): on the surface, fused value 0
    k1 = int(round((-1 - bounds.min_corner[2]) / 0.5))
    assert vol.weight[i, i, k1] == 1.0
    assert vol.sdf[i, i, k1] == pytest.approx(0.0, abs=1e-12)


def test_query_tsdf_interpolates_and_flags_observed(box_frames):
    sub = FrameSet(list(box_frames)[:3], box_frames.intrinsics)
    bounds, dims = small_setup(sub, gs=0.4)
    vol = run_fusion(sub, bounds, dims, 0.4, 0.1)
    # vertex-aligned query returns the stored value
    idx = np.array([1, 1, 1])
    p = bounds.min_corner + idx * 0.4
    val, obs = query_tsdf(vol, p)
    assert val[0] == pytest.approx(vol.sdf[1, 1, 1], abs=1e-12)
    # out-of-bounds query reads free space, unobserved
    val, obs = query_tsdf(vol, bounds.min_corner - 1.0)
    assert val[0] == 0.1
    assert not obs[0]


def test_query_observed_requires_all_corners():
    bounds = BoundingBox([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
    vol = TsdfVolume(grid_dims(bounds, 0.5), bounds, 0.5, 0.1)
    vol.weight[...] = 1.0
    vol.weight[0, 0, 0] = 0.0
    _, obs = query_tsdf(vol, np.array([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]))
    assert not obs[0]
    assert obs[1]


def test_volume_round_trip(tmp_path, box_frames):
    sub = FrameSet(list(box_frames)[:2], box_frames.intrinsics)
    bounds, dims = small_setup(sub, gs=0.4)
    vol = run_fusion(sub, bounds, dims, 0.4, 0.1)
    path = tmp_path / "vol.tsdf"
    save_volume(path, vol)
    back = load_volume(path)
    assert back.dims.shape == vol.dims.shape
    assert np.array_equal(back.bounds.min_corner, vol.bounds.min_corner)
    assert back.gs == vol.gs and back.tr == vol.tr
    # payload is float32 on disk
    assert np.allclose(back.sdf, vol.sdf, atol=1e-6)
    assert np.allclose(back.weight, vol.weight, atol=1e-4)


def test_volume_layout_x_fastest(tmp_path):
    bounds = BoundingBox([0.0, 0.0, 0.0], [1.0, 0.5, 0.5])
    vol = TsdfVolume(grid_dims(bounds, 0.5), bounds, 0.5, 0.1)
    vol.sdf[...] = np.arange(vol.dims.n_vertices).reshape(vol.dims.shape)
    path = tmp_path / "vol.tsdf"
    save_volume(path, vol)
    raw = path.read_bytes()
    header = 4 + 4 + 12 + 48 + 16
    sdf = np.frombuffer(raw[header:header + 4 * vol.dims.n_vertices],
                        dtype="<f4")
    # consecutive file entries walk the x axis first
    assert sdf[0] == vol.sdf[0, 0, 0]
    assert sdf[1] == vol.sdf[1, 0, 0]


def test_load_volume_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.tsdf"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ValueError):
        load_volume(path)


def test_run_fusion_empty_set_raises():
    with pytest.raises(ValueError):
        run_fusion(FrameSet([], None), None, None, 0.1, 0.05)
