"""Three-phase training schedule, configuration, checkpointing and the
metrics log.

Phase 1 fits the decoded SDF to the classical fusion result at random
cell centers (grid and SDF decoder only).  Phase 2 trains everything
from ray batches with coarse samples.  Phase 3 subdivides the grid to
half the cell size and adds fine samples around detected surface
crossings.  The learning-rate schedule runs on a global iteration
counter across all phases.
"""

import io
import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .geometry import compute_scene_bounds, grid_dims
from .model import SceneModel
from .nets import lr_schedule
from .render import LossWeights
from .tsdf import TsdfVolume, query_tsdf, run_fusion

CKPT_MAGIC = b"FSRF"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    F: int = 12
    gs: float = 0.1
    tr: float = 0.05
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    decay_every: int = 250000
    loss_weights: LossWeights = field(default_factory=LossWeights)
    phase_iters: tuple = (3000, 7000, 65000)
    scale: float = 1.0
    cell_batch: int = 1024
    ray_batch: int = 0          # 0 = derive from scene size
    ray_length: float = 0.0     # 0 = derive from scene diagonal
    coarse_step: float = 0.015625
    fine_count: int = 16
    pe_levels: int = 4
    embed_dim: int = 4
    hidden: int = 128
    deform_hidden: int = 64
    margin: float = 0.0         # 0 = default 2 * tr
    seed: int = 0
    jitter: bool = False
    log_every: int = 10
    enable_refinement: bool = True
    enable_tsdf_prior: bool = True
    enable_deformation: bool = True
    enable_pose_opt: bool = True

    def __post_init__(self):
        if any(n <= 0 for n in self.phase_iters):
            raise ValueError("phase iteration counts must be positive")
        if self.cell_batch <= 0:
            raise ValueError("cell batch must be positive")

    def scaled_iters(self):
        return tuple(max(1, int(round(n * self.scale)))
                     for n in self.phase_iters)

    def effective_margin(self):
        return self.margin if self.margin > 0 else 2.0 * self.tr

    def effective_ray_batch(self, frames):
        if self.ray_batch > 0:
            return self.ray_batch
        intr = frames.intrinsics
        total = len(frames) * intr.width * intr.height
        return int(np.clip(total // 50000, 768, 2048))

    def effective_ray_length(self, bounds):
        if self.ray_length > 0:
            return self.ray_length
        return float(np.clip(bounds.diagonal, 4.0, 10.0))

    def apply_ablation(self, name):
        flags = {"no-refine": "enable_refinement",
                 "no-prior": "enable_tsdf_prior",
                 "no-deform": "enable_deformation",
                 "no-pose": "enable_pose_opt"}
        if name not in flags:
            raise ValueError(f"unknown ablation '{name}'")
        return replace(self, **{flags[name]: False})


_CONFIG_KEYS = None


def load_config(path):
    """Flat key=value config file; unknown keys are errors."""
    global _CONFIG_KEYS
    if _CONFIG_KEYS is None:
        _CONFIG_KEYS = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    lw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key in ("lambda_fs", "lambda_sdf", "lambda_rgb", "lambda_reg"):
                lw[key[7:]] = float(val)
                continue
            if key == "phase_iters":
                kwargs[key] = tuple(int(x) for x in val.split(","))
                continue
            if key not in _CONFIG_KEYS or key == "loss_weights":
                raise ValueError(f"{path}:{lineno}: unknown key '{key}'")
            typ = TrainConfig.__dataclass_fields__[key].type
            tname = typ if isinstance(typ, str) else typ.__name__
            if tname == "bool":
                kwargs[key] = val.lower() in ("1", "true", "yes")
            elif tname == "int":
                kwargs[key] = int(val)
            elif tname == "float":
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
    cfg = TrainConfig(**kwargs)
    if lw:
        cfg = replace(cfg, loss_weights=replace(cfg.loss_weights, **lw))
    return cfg


class MetricsLog:
    def __init__(self, path=None):
        self.path = path
        self.fh = open(path, "w") if path else None

    def write(self, iteration, phase, parts, total, lr):
        if self.fh is None:
            return
        self.fh.write(
            f"{iteration} {phase} {parts.get('fs', 0.0):.12e} "
            f"{parts.get('sdf', 0.0):.12e} {parts.get('rgb', 0.0):.12e} "
            f"{parts.get('reg', 0.0):.12e} {total:.12e} {lr:.12e}\n")

    def close(self):
        if self.fh:
            self.fh.close()
            self.fh = None


# ---- training phases ------------------------------------------------------


def phase1_pretrain(model, vol, cfg, rng, log=None, n_iters=None):
    """Fit grid + SDF decoder to the fusion prior at random cell centers."""
    if vol.dims.shape != model.grid.dims.shape:
        raise ValueError("fusion volume grid does not match model grid")
    if n_iters is None:
        n_iters = cfg.scaled_iters()[0]
    cells = np.array(model.grid.dims.cells)
    lo = model.bounds.min_corner
    for _ in range(n_iters):
        idx = np.stack([rng.integers(0, c, size=cfg.cell_batch)
                        for c in cells], axis=-1)
        centers = lo + (idx + 0.5) * cfg.gs
        targets, _ = query_tsdf(vol, centers)
        model.zero_grads()
        loss = model.evaluate_pretrain(centers, targets)
        if log and model.iteration % cfg.log_every == 0:
            log.write(model.iteration, 1, {"sdf": loss}, loss,
                      lr_schedule(cfg.lr, model.iteration, cfg.decay_every))
        model.step(groups=["grid", "mlp_d"])
    return model


def _ray_phase(model, cfg, rng, phase, n_iters, ray_batch, ray_length,
               with_fine, log):
    for _ in range(n_iters):
        batch = model.build_batch(rng, ray_batch, ray_length,
                                  with_fine=with_fine, jitter=cfg.jitter)
        model.zero_grads()
        total, parts = model.evaluate_batch(batch)
        if not np.isfinite(total):
            raise FloatingPointError(
                f"non-finite loss at iteration {model.iteration}")
        if log and model.iteration % cfg.log_every == 0:
            log.write(model.iteration, phase, parts, total,
                      lr_schedule(cfg.lr, model.iteration, cfg.decay_every))
        model.step()
    return model


def phase2_train(model, cfg, rng, log=None, n_iters=None):
    if n_iters is None:
        n_iters = cfg.scaled_iters()[1]
    rb = cfg.effective_ray_batch(model.frames)
    rl = cfg.effective_ray_length(model.bounds)
    return _ray_phase(model, cfg, rng, 2, n_iters, rb, rl, False, log)


def phase3_train(model, cfg, rng, log=None, n_iters=None):
    if n_iters is None:
        n_iters = cfg.scaled_iters()[2]
    model.grid = model.grid.subdivide()
    model.adam.reset("grid")  # new grid parameters start with fresh moments
    rb = cfg.effective_ray_batch(model.frames)
    rl = cfg.effective_ray_length(model.bounds)
    return _ray_phase(model, cfg, rng, 3, n_iters, rb, rl, True, log)


def run_schedule(frames, cfg, log_path=None, checkpoint_path=None):
    """Fuse, then run the three phases; returns (model, fusion volume)."""
    rng = np.random.default_rng(cfg.seed)
    bounds = compute_scene_bounds(frames, cfg.effective_margin())
    dims = grid_dims(bounds, cfg.gs)
    vol = run_fusion(frames, bounds, dims, cfg.gs, cfg.tr)
    model = SceneModel(frames, bounds, cfg, rng)
    log = MetricsLog(log_path)

    def checkpoint(tag):
        if checkpoint_path:
            save_checkpoint(checkpoint_path + tag, model)

    try:
        if cfg.enable_tsdf_prior:
            phase1_pretrain(model, vol, cfg, rng, log=log)
        checkpoint(".phase1")
        phase2_train(model, cfg, rng, log=log)
        checkpoint(".phase2")
        phase3_train(model, cfg, rng, log=log)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model)
    finally:
        log.close()
    return model, vol


# ---- checkpoint container -------------------------------------------------


def _pack_arrays(named):
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        arr = np.asarray(arr)
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        dt = arr.dtype.str.encode()
        buf.write(struct.pack("<H", len(dt)))
        buf.write(dt)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def _unpack_arrays(data):
    buf = io.BytesIO(data)
    (n,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", buf.read(2))
        name = buf.read(ln).decode()
        (ld,) = struct.unpack("<H", buf.read(2))
        dt = np.dtype(buf.read(ld).decode())
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf.read(count * dt.itemsize), dtype=dt)
        out[name] = arr.reshape(shape).copy()
    return out


def _sections(model):
    g = model.grid
    yield "grid", {
        "bounds": np.concatenate([g.bounds.min_corner, g.bounds.max_corner]),
        "gs": np.array([g.gs]),
        "F": np.array([g.F], dtype=np.int64),
        "dims": np.array(g.dims.shape, dtype=np.int64),
        "features": g.features,
    }
    for tag, net in (("mlp_d", model.mlp_d), ("mlp_c", model.mlp_c),
                     ("deform", model.deform.net)):
        d = {}
        for i, (w, b) in enumerate(zip(net.W, net.b)):
            d[f"W{i}"] = w
            d[f"b{i}"] = b
        yield tag, d
    yield "embed", {"values": model.embed.values}
    yield "refine", {"s": model.refine.s, "tau": model.refine.tau}
    yield "pose", {"rot": model.deltas.rot, "trans": model.deltas.trans}
    adam = {}
    for name, m in model.adam.m.items():
        adam[f"m:{name}"] = m
        adam[f"v:{name}"] = model.adam.v[name]
        adam[f"t:{name}"] = np.array([model.adam.t[name]], dtype=np.int64)
    yield "adam", adam
    yield "counters", {"iteration": np.array([model.iteration], dtype=np.int64)}
    st = model.rng.bit_generator.state
    yield "rng", {"state": np.array(
        [st["state"]["state"] & (2 ** 64 - 1), st["state"]["state"] >> 64,
         st["state"]["inc"] & (2 ** 64 - 1), st["state"]["inc"] >> 64,
         st["has_uint32"], st["uinteger"]], dtype=np.uint64)}


def save_checkpoint(path, model):
    """Atomic write of the tagged-section checkpoint container."""
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for tag, named in _sections(model):
            tb = tag.encode()
            payload = _pack_arrays(named)
            fh.write(struct.pack("<H", len(tb)))
            fh.write(tb)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
    os.replace(tmp, path)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        sections = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            (ln,) = struct.unpack("<H", head)
            tag = fh.read(ln).decode()
            (size,) = struct.unpack("<Q", fh.read(8))
            sections[tag] = _unpack_arrays(fh.read(size))
    return sections


def load_checkpoint(path, model):
    """Restore all parameters, optimizer state and counters into model."""
    from .geometry import BoundingBox, GridDims
    from .grid import FeatureGrid

    sections = read_checkpoint(path)
    g = sections["grid"]
    dims = GridDims(*(int(x) for x in g["dims"]))
    bounds = BoundingBox(g["bounds"][:3], g["bounds"][3:])
    grid = FeatureGrid(bounds, float(g["gs"][0]), int(g["F"][0]), dims=dims)
    grid.features = g["features"].copy()
    model.grid = grid
    model.bounds = bounds
    for tag, net in (("mlp_d", model.mlp_d), ("mlp_c", model.mlp_c),
                     ("deform", model.deform.net)):
        d = sections[tag]
        for i in range(len(net.W)):
            net.W[i][...] = d[f"W{i}"]
            net.b[i][...] = d[f"b{i}"]
    model.embed.values[...] = sections["embed"]["values"]
    model.refine.s[...] = sections["refine"]["s"]
    model.refine.tau[...] = sections["refine"]["tau"]
    model.deltas.rot[...] = sections["pose"]["rot"]
    model.deltas.trans[...] = sections["pose"]["trans"]
    model.adam.m.clear()
    model.adam.v.clear()
    model.adam.t.clear()
    for key, arr in sections["adam"].items():
        kind, name = key.split(":", 1)
        if kind == "m":
            model.adam.m[name] = arr.copy()
        elif kind == "v":
            model.adam.v[name] = arr.copy()
        else:
            model.adam.t[name] = int(arr[0])
    model.iteration = int(sections["counters"]["iteration"][0])
    if "rng" in sections:
        s = [int(x) for x in sections["rng"]["state"]]
        model.rng.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": s[0] | (s[1] << 64), "inc": s[2] | (s[3] << 64)},
            "has_uint32": s[4], "uinteger": s[5]}
    return model
