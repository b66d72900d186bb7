"""Camera models, rigid transforms, scene bounds and grid coordinate mapping.

Convention used everywhere: camera x right, y up, looking along -z.  The
image-plane vector for pixel (u, v) is ((u - cx) / fx, -(v - cy) / fy, -1),
so a point at z-depth d sits at d * plane_vector in camera coordinates.
Poses are camera-to-world.
"""

from dataclasses import dataclass, field

import numpy as np


class EmptySceneError(ValueError):
    """No valid depth observation in any frame."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant != +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other):
        """self o other (apply other first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class BoundingBox:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if np.any(hi < lo):
            raise ValueError("max_corner < min_corner")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def extents(self):
        return self.max_corner - self.min_corner

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.extents))

    def expanded(self, margin):
        return BoundingBox(self.min_corner - margin, self.max_corner + margin)

    def union(self, other):
        return BoundingBox(np.minimum(self.min_corner, other.min_corner),
                           np.maximum(self.max_corner, other.max_corner))


@dataclass(frozen=True)
class GridDims:
    """Per-axis vertex counts (cells + 1)."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 2:
            raise ValueError("grid needs at least 2 vertices per axis")

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def cells(self):
        return (self.nx - 1, self.ny - 1, self.nz - 1)

    @property
    def n_vertices(self):
        return self.nx * self.ny * self.nz


@dataclass
class Frame:
    """One RGB-D observation.  depth in meters, 0 = invalid; color in [0,1]."""

    depth: np.ndarray
    color: np.ndarray
    pose: Pose

    def valid_mask(self):
        return self.depth > 0


@dataclass
class FrameSet:
    frames: list = field(default_factory=list)
    intrinsics: Intrinsics = None

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)


def plane_vector(u, v, intr):
    """Image-plane vector(s) ((u-cx)/fx, -(v-cy)/fy, -1); u, v scalar or array."""
    u = np.asarray(u, dtype=np.float64)
    x = (u - intr.cx) / intr.fx
    y = -(np.asarray(v, dtype=np.float64) - intr.cy) / intr.fy
    return np.stack([x, y, -np.ones_like(x)], axis=-1)


def backproject(u, v, depth, intr, pose):
    """Lift pixel(s) at z-depth `depth` to world coordinates."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    pc = plane_vector(u, v, intr) * depth[..., None]
    return pc @ pose.rotation.T + pose.translation


def project(p, intr, pose):
    """Inverse of backproject: world point(s) -> (u, v, z-depth)."""
    p = np.asarray(p, dtype=np.float64)
    pc = (p - pose.translation) @ pose.rotation
    d = -pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.cx + intr.fx * pc[..., 0] / d
        v = intr.cy - intr.fy * pc[..., 1] / d
    return u, v, d


def compute_scene_bounds(frames, margin):
    """Axis-aligned box covering every valid back-projected depth pixel."""
    intr = frames.intrinsics
    uu, vv = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    lo = None
    hi = None
    for frame in frames:
        mask = frame.valid_mask()
        if not mask.any():
            continue
        pts = backproject(uu[mask], vv[mask], frame.depth[mask], intr, frame.pose)
        fl = pts.min(axis=0)
        fh = pts.max(axis=0)
        lo = fl if lo is None else np.minimum(lo, fl)
        hi = fh if hi is None else np.maximum(hi, fh)
    if lo is None:
        raise EmptySceneError("no frame contains a valid depth pixel")
    return BoundingBox(lo - margin, hi + margin)


def grid_dims(bounds, gs):
    """Vertex counts for cell size gs: ceil(L/gs) cells + 1 per axis."""
    if gs <= 0:
        raise ValueError("cell size must be positive")
    L = bounds.extents
    if np.any(L <= 0):
        raise ValueError("degenerate bounding box")
    # relative slack so exact multiples of gs do not round up (1.0/0.1 > 10 in fp)
    cells = np.ceil((L / gs) * (1 - 1e-12)).astype(int)
    cells = np.maximum(cells, 1)
    return GridDims(int(cells[0]) + 1, int(cells[1]) + 1, int(cells[2]) + 1)


def world_to_grid(p, bounds, gs):
    """Continuous grid coordinates; min_corner -> (0,0,0), one cell -> +1.

    Returns (coords, contained) where contained flags points inside the box.
    """
    p = np.asarray(p, dtype=np.float64)
    g = (p - bounds.min_corner) / gs
    contained = np.all((p >= bounds.min_corner) & (p <= bounds.max_corner), axis=-1)
    return g, contained
