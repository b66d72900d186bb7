"""Procedural synthetic RGB-D scenes with analytic SDFs, Kinect-like depth
corruption, per-frame intrinsic perturbation, and on-disk dataset I/O.

Scene SDF sign convention: positive in free space, negative inside solids
(walls and objects), matching the mesh inside/outside.
"""

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import BoundingBox, Frame, FrameSet, Intrinsics, Pose
from .mesh import extract_mesh
from .rays import refine_plane


# ---- analytic primitives --------------------------------------------------


def box_sdf(p, center, half):
    """Standard solid-box SDF: positive outside."""
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def sphere_sdf(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


@dataclass
class Primitive:
    kind: str           # "room", "sphere", "box", "slab"
    center: np.ndarray
    size: np.ndarray    # half-extents, or (radius, 0, 0) for spheres
    albedo: np.ndarray

    def sdf(self, p):
        if self.kind == "sphere":
            return sphere_sdf(p, self.center, self.size[0])
        if self.kind == "room":
            # free space is the box interior
            return -box_sdf(p, self.center, self.size)
        return box_sdf(p, self.center, self.size)


@dataclass
class SyntheticScene:
    primitives: list
    poses: list
    intrinsics: Intrinsics
    perturbations: dict = field(default_factory=dict)  # frame -> (s*, tau*)

    def sdf(self, p):
        vals = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        return vals.min(axis=0)

    def nearest_primitive(self, p):
        vals = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        return np.argmin(np.abs(vals), axis=0)

    def normal(self, p, h=1e-5):
        g = np.empty(p.shape)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            g[..., a] = self.sdf(p + e) - self.sdf(p - e)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.where(n > 0, n, 1.0)

    def room_bounds(self):
        room = self.primitives[0]
        return BoundingBox(room.center - room.size, room.center + room.size)

    def ground_truth_mesh(self, resolution=0.01):
        return extract_mesh(self.sdf, self.room_bounds().expanded(0.05),
                            resolution=resolution)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose: x right, y up, looking along -z at target."""
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=-1), eye)


def make_scene(kind="box", n_frames=20, width=80, height=60, focal=70.0,
               room=(4.0, 3.0, 2.5), seed=0):
    """Box room scene, optionally cluttered with primitives, with an orbit
    trajectory viewing the interior."""
    rng = np.random.default_rng(seed)
    half = np.asarray(room, dtype=np.float64) / 2.0
    prims = [Primitive("room", np.zeros(3), half, np.array([0.75, 0.72, 0.68]))]
    if kind == "cluttered":
        prims += [
            Primitive("sphere", np.array([0.8, 0.4, -half[2] + 0.35]),
                      np.array([0.35, 0, 0]), np.array([0.85, 0.25, 0.2])),
            Primitive("sphere", np.array([-0.7, -0.5, -half[2] + 0.25]),
                      np.array([0.25, 0, 0]), np.array([0.2, 0.45, 0.85])),
            Primitive("box", np.array([-0.6, 0.7, -half[2] + 0.3]),
                      np.array([0.3, 0.25, 0.3]), np.array([0.25, 0.75, 0.3])),
            Primitive("slab", np.array([0.5, -0.8, -half[2] + 0.55]),
                      np.array([0.4, 0.3, 0.02]), np.array([0.9, 0.8, 0.3])),
        ]
    elif kind != "box":
        raise ValueError(f"unknown scene kind '{kind}'")
    intr = Intrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0,
                      width, height)
    poses = []
    radius = 0.35 * min(room[0], room[1])
    # cycle the viewing elevation so floor, walls and ceiling all get seen
    elevations = (-0.9, -0.3, 0.35, 1.0)
    for i in range(n_frames):
        theta = 2 * np.pi * i / n_frames
        elev = elevations[i % len(elevations)]
        eye = np.array([radius * np.cos(theta), radius * np.sin(theta),
                        0.1 * half[2]])
        look = np.array([np.cos(theta + np.pi) * np.cos(elev),
                         np.sin(theta + np.pi) * np.cos(elev),
                         np.sin(elev)])
        up = (1.0, 0.0, 0.0) if abs(elev) > 0.9 else (0.0, 0.0, 1.0)
        poses.append(look_at(eye, eye + look, up=up))
    return SyntheticScene(prims, poses, intr)


# ---- rendering ------------------------------------------------------------

LIGHT_DIR = np.array([0.4, 0.25, 0.88])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)


def _ray_box_hits(eye, d, center, half, from_inside):
    """Slab-method intersection; returns hit parameter t or inf per ray.

    t is in units of the (unnormalized) direction d.  from_inside picks
    the exit face (room walls seen from the interior).
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (center - half - eye) / d
        t1 = (center + half - eye) / d
    t_near = np.minimum(t0, t1).max(axis=-1)
    t_far = np.maximum(t0, t1).min(axis=-1)
    if from_inside:
        t = t_far
        ok = (t_far > 0) & (t_near < t_far)
    else:
        t = t_near
        ok = (t_near > 1e-12) & (t_near <= t_far)
    return np.where(ok, t, np.inf)


def _ray_sphere_hits(eye, d, center, radius):
    oc = eye - center
    a = np.einsum("ni,ni->n", d, d)
    b = 2.0 * d @ oc
    c = oc @ oc - radius ** 2
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = (-b - sq) / (2 * a)
    return np.where(ok & (t > 1e-12), t, np.inf)


def primitive_hits(prim, eye, d_world):
    if prim.kind == "sphere":
        return _ray_sphere_hits(eye, d_world, prim.center, prim.size[0])
    return _ray_box_hits(eye, d_world, prim.center, prim.size,
                         from_inside=prim.kind == "room")


def render_frame(scene, i, t_max=20.0):
    """Ray-cast depth (z-depth, 0 = miss) and flat-shaded color for frame i.

    Intersections are analytic (spheres and boxes), so depths are exact.
    A perturbed frame is rendered along the refined plane vectors
    s* (rho + tau*), so that learning (s, tau) = (s*, tau*) reproduces
    the true rays.
    """
    intr = scene.intrinsics
    pose = scene.poses[i]
    uu, vv = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                         np.arange(intr.height, dtype=np.float64))
    from .geometry import plane_vector
    rho = plane_vector(uu.ravel(), vv.ravel(), intr)
    if i in scene.perturbations:
        s_star, tau_star = scene.perturbations[i]
        rho = refine_plane(rho, np.asarray(s_star), np.asarray(tau_star))
    d_world = rho @ pose.rotation.T
    eye = pose.translation

    n_px = rho.shape[0]
    hits = np.stack([primitive_hits(p, eye, d_world)
                     for p in scene.primitives], axis=0)
    which = np.argmin(hits, axis=0)
    t = hits[which, np.arange(n_px)]
    hit = np.isfinite(t) & (t <= t_max)
    t = np.where(hit, t, 0.0)

    depth = t.reshape(intr.height, intr.width)
    color = np.zeros((n_px, 3))
    if hit.any():
        ph = eye + t[hit, None] * d_world[hit]
        albedo = np.stack([scene.primitives[k].albedo for k in which[hit]])
        n = scene.normal(ph)
        shade = 0.3 + 0.7 * np.clip(n @ LIGHT_DIR, 0.0, 1.0)
        color[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)
    return depth, color.reshape(intr.height, intr.width, 3)


def corrupt_depth(depth, rng, hole_fraction=0.0, sigma0=0.0):
    """Kinect-like corruption: depth-dependent noise, millimeter
    quantization, and elliptical holes."""
    out = depth.copy()
    valid = out > 0
    if sigma0 > 0:
        noise = rng.normal(0.0, 1.0, size=out.shape) * sigma0 * out ** 2
        out = np.where(valid, np.maximum(out + noise, 0.001), 0.0)
    # 16-bit millimeter lattice
    out = np.round(out * 1000.0).clip(0, 65535) / 1000.0
    if hole_fraction > 0:
        h, w = out.shape
        target = hole_fraction * valid.sum()
        holed = np.zeros_like(valid)
        yy, xx = np.mgrid[0:h, 0:w]
        guard = 0
        while holed[valid].sum() < target and guard < 10000:
            guard += 1
            cx = rng.uniform(0, w)
            cy = rng.uniform(0, h)
            ax = rng.uniform(1.5, max(3.0, w / 16))
            ay = rng.uniform(1.5, max(3.0, h / 16))
            ang = rng.uniform(0, np.pi)
            dx = xx - cx
            dy = yy - cy
            u = dx * np.cos(ang) + dy * np.sin(ang)
            v = -dx * np.sin(ang) + dy * np.cos(ang)
            holed |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        out[holed] = 0.0
    return out


def perturb_intrinsics(scene, i, s_star, tau_star):
    """Register ground-truth refinement parameters for frame i."""
    scene.perturbations[i] = (np.asarray(s_star, dtype=np.float64),
                              np.asarray(tau_star, dtype=np.float64))
    return scene


def generate_dataset(scene, rng=None, hole_fraction=0.0, sigma0=0.0):
    """Render every frame into a FrameSet, applying depth corruption."""
    frames = []
    for i in range(len(scene.poses)):
        depth, color = render_frame(scene, i)
        if rng is not None and (hole_fraction > 0 or sigma0 > 0):
            depth = corrupt_depth(depth, rng, hole_fraction, sigma0)
        else:
            depth = np.round(depth * 1000.0).clip(0, 65535) / 1000.0
        frames.append(Frame(depth, color, scene.poses[i]))
    return FrameSet(frames, scene.intrinsics)


# ---- dataset on disk ------------------------------------------------------


def save_dataset(frames, path):
    """depth/NNNN.png (16-bit mm), color/NNNN.png (8-bit RGB),
    poses/NNNN.txt (4x4 row-major camera-to-world), intrinsics.txt."""
    for sub in ("depth", "color", "poses"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    intr = frames.intrinsics
    with open(os.path.join(path, "intrinsics.txt"), "w") as fh:
        fh.write(f"{intr.fx:.17g} {intr.fy:.17g} {intr.cx:.17g} "
                 f"{intr.cy:.17g} {intr.width} {intr.height}\n")
    for i, frame in enumerate(frames):
        mm = np.round(frame.depth * 1000.0).clip(0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(os.path.join(path, "depth", f"{i:04d}.png"))
        rgb = np.round(frame.color * 255.0).clip(0, 255).astype(np.uint8)
        Image.fromarray(rgb).save(os.path.join(path, "color", f"{i:04d}.png"))
        np.savetxt(os.path.join(path, "poses", f"{i:04d}.txt"),
                   frame.pose.matrix(), fmt="%.17g")


def _orthonormalize(R, name):
    drift = np.abs(R.T @ R - np.eye(3)).max()
    U, _, Vt = np.linalg.svd(R)
    Rn = U @ Vt
    if np.linalg.det(Rn) < 0:
        U[:, -1] *= -1
        Rn = U @ Vt
    if drift > 1e-6:
        warnings.warn(f"{name}: pose rotation drift {drift:.2e}, "
                      "re-orthonormalized")
    return Rn


def load_dataset(path):
    ipath = os.path.join(path, "intrinsics.txt")
    if not os.path.exists(ipath):
        raise FileNotFoundError(f"{ipath}: missing intrinsics file")
    vals = open(ipath).read().split()
    intr = Intrinsics(float(vals[0]), float(vals[1]), float(vals[2]),
                      float(vals[3]), int(vals[4]), int(vals[5]))
    names = {}
    for sub in ("depth", "color", "poses"):
        d = os.path.join(path, sub)
        if not os.path.isdir(d):
            raise FileNotFoundError(f"{d}: missing dataset directory")
        names[sub] = sorted(os.listdir(d))
    n = {k: len(v) for k, v in names.items()}
    if len(set(n.values())) != 1:
        raise ValueError(f"{path}: frame count mismatch across channels {n}")
    frames = []
    for i in range(n["depth"]):
        dpath = os.path.join(path, "depth", names["depth"][i])
        cpath = os.path.join(path, "color", names["color"][i])
        ppath = os.path.join(path, "poses", names["poses"][i])
        try:
            depth = np.asarray(Image.open(dpath), dtype=np.float64) / 1000.0
        except Exception as exc:
            raise ValueError(f"{dpath}: cannot parse depth image: {exc}")
        try:
            color = np.asarray(Image.open(cpath), dtype=np.float64) / 255.0
        except Exception as exc:
            raise ValueError(f"{cpath}: cannot parse color image: {exc}")
        M = np.loadtxt(ppath)
        if M.shape != (4, 4):
            raise ValueError(f"{ppath}: expected a 4x4 pose matrix")
        R = _orthonormalize(M[:3, :3], ppath)
        frames.append(Frame(depth, color, Pose(R, M[:3, 3])))
    return FrameSet(frames, intr)
