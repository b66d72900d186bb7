"""Scene model: parameter bookkeeping, batch construction and quick
gradient spot checks (the full eight-group sweep lives in the acceptance
suite)."""

import numpy as np
import pytest

from gridsurf.geometry import compute_scene_bounds
from gridsurf.model import SceneModel
from gridsurf.trainer import TrainConfig


@pytest.fixture(scope="module")
def mini_model(cluttered_frames):
    cfg = TrainConfig(gs=0.3, hidden=16, seed=3)
    bounds = compute_scene_bounds(cluttered_frames, cfg.effective_margin())
    rng = np.random.default_rng(7)
    model = SceneModel(cluttered_frames, bounds, cfg, rng)
    model.grid.features += rng.normal(0, 0.05, model.grid.features.shape)
    model.embed.values += rng.normal(0, 0.1, model.embed.values.shape)
    model.refine.s += rng.normal(0, 0.01, model.refine.s.shape)
    model.refine.tau += rng.normal(0, 0.005, model.refine.tau.shape)
    model.deltas.rot += rng.normal(0, 0.01, model.deltas.rot.shape)
    model.deltas.trans += rng.normal(0, 0.01, model.deltas.trans.shape)
    return model


def directional_check(model, batch, keys, seed, hs=(1e-5, 1e-6, 1e-7)):
    """Best relative FD error of the directional derivative over steps hs."""
    entries = model.param_entries(keys)
    rng = np.random.default_rng(seed)
    deltas = {k: rng.normal(size=p.shape) for k, (p, g) in entries.items()}
    nrm = np.sqrt(sum((d * d).sum() for d in deltas.values()))
    for k in deltas:
        deltas[k] /= nrm
    model.zero_grads()
    model.evaluate_batch(batch)
    ana = sum((g * deltas[k]).sum() for k, (p, g) in entries.items())
    best = np.inf
    for h in hs:
        for k, (p, g) in entries.items():
            p += h * deltas[k]
        lp, _ = model.evaluate_batch(batch, accumulate=False)
        for k, (p, g) in entries.items():
            p -= 2 * h * deltas[k]
        lm, _ = model.evaluate_batch(batch, accumulate=False)
        for k, (p, g) in entries.items():
            p += h * deltas[k]
        fd = (lp - lm) / (2 * h)
        best = min(best, abs(fd - ana) / max(abs(fd), abs(ana), 1e-10))
    return best


def test_param_entries_groups(mini_model):
    names = set(mini_model.param_entries())
    assert "grid" in names and "embed" in names
    assert any(n.startswith("mlp_d.") for n in names)
    only = mini_model.param_entries(["refine.s"])
    assert set(only) == {"refine.s"}


def test_param_entries_respect_ablation_flags(cluttered_frames):
    cfg = TrainConfig(gs=0.3, hidden=16).apply_ablation("no-refine")
    cfg = cfg.apply_ablation("no-pose")
    bounds = compute_scene_bounds(cluttered_frames, cfg.effective_margin())
    model = SceneModel(cluttered_frames, bounds, cfg,
                       np.random.default_rng(0))
    names = set(model.param_entries())
    assert not any(n.startswith("refine") or n.startswith("pose")
                   for n in names)


def test_build_batch_reproducible(mini_model):
    a = mini_model.build_batch(np.random.default_rng(5), 16, 2.0)
    b = mini_model.build_batch(np.random.default_rng(5), 16, 2.0)
    assert np.array_equal(a.ray_u, b.ray_u)
    assert np.array_equal(a.sample_t, b.sample_t)
    assert np.array_equal(a.labels, b.labels)


def test_build_batch_invalid_depth_excluded(mini_model):
    frame = mini_model.frames[0]
    saved = frame.depth[0, 0]
    frame.depth[0, 0] = 0.0
    try:
        rng = np.random.default_rng(0)
        batch = mini_model.build_batch(rng, 32, 2.0)
        # manually force one ray onto the dead pixel
        batch.ray_u[0] = 0.0
        batch.ray_v[0] = 0.0
        batch.ray_d_obs[0] = 0.0
        batch.labels[batch.sample_ray == 0] = 2
        total, parts = mini_model.evaluate_batch(batch, accumulate=False)
        assert np.isfinite(total)
    finally:
        frame.depth[0, 0] = saved


def test_evaluate_batch_gradient_spot_checks(mini_model):
    batch = mini_model.build_batch(np.random.default_rng(11), 24, 2.0,
                                   with_fine=True)
    for i, keys in enumerate((["grid"], ["mlp_d"], ["refine.tau"],
                              ["pose.rot", "pose.trans"])):
        rel = directional_check(mini_model, batch, keys, seed=20 + i)
        assert rel < 1e-5, f"{keys}: relative error {rel:.2e}"


def test_evaluate_pretrain_gradient(mini_model):
    rng = np.random.default_rng(3)
    lo = mini_model.bounds.min_corner
    centers = lo + rng.uniform(0.1, 0.9, size=(64, 3)) * (
        mini_model.bounds.extents - 0.2)
    targets = rng.normal(scale=0.05, size=64)
    rel = pretrain_directional_check(mini_model, centers, targets)
    assert rel < 1e-5


def pretrain_directional_check(model, centers, targets):
    model.zero_grads()
    model.evaluate_pretrain(centers, targets)
    entries = model.param_entries(["grid", "mlp_d"])
    rng = np.random.default_rng(9)
    deltas = {k: rng.normal(size=p.shape) for k, (p, g) in entries.items()}
    nrm = np.sqrt(sum((d * d).sum() for d in deltas.values()))
    for k in deltas:
        deltas[k] /= nrm
    ana = sum((g * deltas[k]).sum() for k, (p, g) in entries.items())
    best = np.inf
    for h in (1e-5, 1e-6):
        for k, (p, g) in entries.items():
            p += h * deltas[k]
        lp = model.evaluate_pretrain(centers, targets, accumulate=False)
        for k, (p, g) in entries.items():
            p -= 2 * h * deltas[k]
        lm = model.evaluate_pretrain(centers, targets, accumulate=False)
        for k, (p, g) in entries.items():
            p += h * deltas[k]
        fd = (lp - lm) / (2 * h)
        best = min(best, abs(fd - ana) / max(abs(fd), abs(ana), 1e-10))
    return best


def test_sdf_at_outside_bounds_reads_free_space(mini_model):
    p = mini_model.bounds.max_corner + 1.0
    assert mini_model.sdf_at(p[None, :])[0] == mini_model.cfg.tr


def test_step_advances_iteration(cluttered_frames):
    cfg = TrainConfig(gs=0.3, hidden=16)
    bounds = compute_scene_bounds(cluttered_frames, cfg.effective_margin())
    model = SceneModel(cluttered_frames, bounds, cfg,
                       np.random.default_rng(0))
    batch = model.build_batch(np.random.default_rng(1), 8, 2.0)
    model.zero_grads()
    model.evaluate_batch(batch)
    before = model.iteration
    model.step()
    assert model.iteration == before + 1


def test_untrained_model_reads_free_space(cluttered_frames):
    # zero features + bias init: the whole scene starts at +tr
    cfg = TrainConfig(gs=0.3, hidden=16)
    bounds = compute_scene_bounds(cluttered_frames, cfg.effective_margin())
    model = SceneModel(cluttered_frames, bounds, cfg,
                       np.random.default_rng(0))
    rng = np.random.default_rng(2)
    p = rng.uniform(bounds.min_corner, bounds.max_corner, size=(50, 3))
    assert np.allclose(model.sdf_at(p), cfg.tr, atol=1e-12)
