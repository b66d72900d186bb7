"""Marching-cubes surface extraction, surface point sampling, and the
evaluation metrics (Chamfer-l1, F-score, normal consistency, IoU)."""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (N, 3) float
    triangles: np.ndarray  # (M, 3) int
    normals: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def face_corners(self):
        return (self.vertices[self.triangles[:, 0]],
                self.vertices[self.triangles[:, 1]],
                self.vertices[self.triangles[:, 2]])

    def face_normals_areas(self):
        a, b, c = self.face_corners()
        cross = np.cross(b - a, c - a)
        norm = np.linalg.norm(cross, axis=-1)
        areas = 0.5 * norm
        with np.errstate(invalid="ignore", divide="ignore"):
            n = cross / np.where(norm > 0, norm, 1.0)[:, None]
        return n, areas


def vertex_normals_from_faces(vertices, triangles):
    """Area-weighted average of incident face normals, normalized."""
    mesh = TriangleMesh(vertices, triangles)
    fn, areas = mesh.face_normals_areas()
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, triangles[:, k], fn * areas[:, None])
    norm = np.linalg.norm(acc, axis=-1, keepdims=True)
    return acc / np.where(norm > 0, norm, 1.0)


def extract_mesh(sdf_sampler, bounds, resolution=0.01, observed_sampler=None):
    """Zero-isosurface of a signed distance sampler over a bounding box.

    sdf_sampler maps (N, 3) world points to (N,) signed distances
    (negative inside).  observed_sampler, when given, restricts extraction
    to vertices it flags True (used to skip never-observed TSDF regions).
    Returns an empty mesh when the field has no sign change.
    """
    lo = bounds.min_corner
    L = bounds.extents
    n = np.maximum(np.ceil(L / resolution).astype(int), 1) + 1
    axes = [lo[a] + resolution * np.arange(n[a]) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vol = np.asarray(sdf_sampler(pts)).reshape(tuple(n))
    mask = None
    if observed_sampler is not None:
        mask = np.asarray(observed_sampler(pts)).reshape(tuple(n))
        if not mask.any():
            vol = np.abs(vol)  # force the no-crossing path below
    if vol.min() >= 0 or vol.max() <= 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                            np.zeros((0, 3)))
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=0.0, spacing=(resolution,) * 3,
        gradient_direction="descent", mask=mask)
    verts = verts + lo
    # drop degenerate faces
    m = TriangleMesh(verts, faces)
    _, areas = m.face_normals_areas()
    faces = faces[areas > 0]
    normals = vertex_normals_from_faces(verts, faces)
    return TriangleMesh(verts, faces, normals)


def sample_surface(mesh, density=1e4, rng=None):
    """Area-weighted surface samples with their triangles' normals.

    density is points per square meter (1e4 = one point per cm^2).
    """
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = rng if rng is not None else np.random.default_rng(0)
    fn, areas = mesh.face_normals_areas()
    total_area = areas.sum()
    n_total = int(round(total_area * density))
    if n_total == 0:
        raise ValueError("mesh area too small for the requested density")
    counts = rng.multinomial(n_total, areas / total_area)
    tri_idx = np.repeat(np.arange(len(areas)), counts)
    a, b, c = mesh.face_corners()
    r1 = np.sqrt(rng.uniform(size=n_total))
    r2 = rng.uniform(size=n_total)
    pts = ((1 - r1)[:, None] * a[tri_idx]
           + (r1 * (1 - r2))[:, None] * b[tri_idx]
           + (r1 * r2)[:, None] * c[tri_idx])
    return pts, fn[tri_idx]


def chamfer_l1(A, B):
    """Symmetric mean nearest-neighbor Euclidean distance."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty point cloud")
    da, _ = cKDTree(B).query(A)
    db, _ = cKDTree(A).query(B)
    return 0.5 * (da.mean() + db.mean())


def f_score(pred, gt, tau=0.05):
    """Harmonic mean of precision/recall at distance threshold tau."""
    pred = np.atleast_2d(pred)
    gt = np.atleast_2d(gt)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("empty point cloud")
    dp, _ = cKDTree(gt).query(pred)
    dg, _ = cKDTree(pred).query(gt)
    precision = float((dp <= tau).mean())
    recall = float((dg <= tau).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def normal_consistency(A, nA, B, nB):
    """Symmetric mean |n_a . n_b| over nearest-neighbor pairs."""
    if nA is None or nB is None:
        raise ValueError("point clouds must carry normals")
    _, ia = cKDTree(B).query(A)
    _, ib = cKDTree(A).query(B)
    fwd = np.abs(np.einsum("ij,ij->i", nA, nB[ia])).mean()
    bwd = np.abs(np.einsum("ij,ij->i", nB, nA[ib])).mean()
    return 0.5 * float(fwd + bwd)


# ---- surface-occupancy IoU ------------------------------------------------


def _tri_box_overlap(tri, center, half):
    """Separating-axis test of one triangle against one axis-aligned box."""
    v = tri - center
    e = np.array([v[1] - v[0], v[2] - v[1], v[0] - v[2]])
    # box face normals
    if np.any(np.max(v, axis=0) < -half) or np.any(np.min(v, axis=0) > half):
        return False
    # triangle plane
    n = np.cross(e[0], e[1])
    d = -np.dot(n, v[0])
    r = np.dot(half, np.abs(n))
    if abs(d) > r:
        return False
    # 9 cross-product axes
    for i in range(3):
        for a in range(3):
            axis = np.zeros(3)
            axis[a] = 1.0
            ax = np.cross(axis, e[i])
            p = v @ ax
            r = np.dot(half, np.abs(ax))
            if p.min() > r or p.max() < -r:
                return False
    return True


def voxelize_surface(mesh, edge, origin):
    """Voxel indices (set of tuples) intersected by any triangle."""
    occ = set()
    half = np.full(3, edge / 2.0)
    a, b, c = mesh.face_corners()
    for i in range(len(mesh.triangles)):
        tri = np.array([a[i], b[i], c[i]])
        lo = np.floor((tri.min(axis=0) - origin) / edge - 1e-12).astype(int)
        hi = np.floor((tri.max(axis=0) - origin) / edge + 1e-12).astype(int)
        for ix in range(lo[0], hi[0] + 1):
            for iy in range(lo[1], hi[1] + 1):
                for iz in range(lo[2], hi[2] + 1):
                    key = (ix, iy, iz)
                    if key in occ:
                        continue
                    center = origin + (np.array(key) + 0.5) * edge
                    if _tri_box_overlap(tri, center, half):
                        occ.add(key)
    return occ


def iou(mesh_pred, mesh_gt, edge=0.1):
    """Surface-occupancy IoU on a shared voxel lattice."""
    if mesh_pred.is_empty or mesh_gt.is_empty:
        raise ValueError("empty mesh")
    lo = np.minimum(mesh_pred.vertices.min(axis=0), mesh_gt.vertices.min(axis=0))
    origin = np.floor(lo / edge) * edge
    p = voxelize_surface(mesh_pred, edge, origin)
    g = voxelize_surface(mesh_gt, edge, origin)
    union = len(p | g)
    if union == 0:
        raise ValueError("empty voxel union")
    return len(p & g) / union


@dataclass
class MetricReport:
    chamfer_l1: float
    iou: float
    normal_consistency: float
    f_score: float
    fscore_tau: float = 0.05
    iou_edge: float = 0.1
    sample_density: float = 1e4

    def record_line(self):
        return (f"chamfer_l1={self.chamfer_l1:.6f} iou={self.iou:.6f} "
                f"nc={self.normal_consistency:.6f} fscore={self.f_score:.6f}")

    def table(self):
        return ("metric              value\n"
                f"chamfer_l1 (m)      {self.chamfer_l1:.6f}\n"
                f"iou                 {self.iou:.6f}\n"
                f"normal_consistency  {self.normal_consistency:.6f}\n"
                f"f_score             {self.f_score:.6f}\n")


def evaluate_meshes(pred, gt, fscore_tau=0.05, iou_edge=0.1, density=1e4,
                    rng=None):
    """All four metrics between a predicted and a ground-truth mesh."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pa, na = sample_surface(pred, density=density, rng=rng)
    pb, nb = sample_surface(gt, density=density, rng=rng)
    return MetricReport(
        chamfer_l1=float(chamfer_l1(pa, pb)),
        iou=float(iou(pred, gt, edge=iou_edge)),
        normal_consistency=float(normal_consistency(pa, na, pb, nb)),
        f_score=float(f_score(pa, pb, tau=fscore_tau)),
        fscore_tau=fscore_tau, iou_edge=iou_edge, sample_density=density)


# ---- PLY ------------------------------------------------------------------


def save_ply(path, mesh):
    """Binary little-endian PLY with positions, normals, faces."""
    normals = mesh.normals
    if normals is None:
        normals = vertex_normals_from_faces(mesh.vertices, mesh.triangles)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        vdata = np.hstack([mesh.vertices, normals]).astype("<f4")
        fh.write(vdata.tobytes())
        for tri in mesh.triangles:
            fh.write(struct.pack("<B3i", 3, *tri))


def load_ply(path):
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vert = n_face = 0
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.split()
            if tok[0] == b"element":
                if tok[1] == b"vertex":
                    n_vert = int(tok[2])
                else:
                    n_face = int(tok[2])
            elif tok[0] == b"property" and tok[1] == b"float":
                props.append(tok[2].decode())
            elif tok[0] == b"end_header":
                break
        vdata = np.frombuffer(fh.read(4 * len(props) * n_vert),
                              dtype="<f4").reshape(n_vert, len(props))
        verts = vdata[:, :3].astype(np.float64)
        normals = vdata[:, 3:6].astype(np.float64) if len(props) >= 6 else None
        faces = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            raw = fh.read(13)
            if len(raw) < 13:
                raise ValueError(f"{path}: truncated face data")
            cnt, a, b, c = struct.unpack("<B3i", raw)
            if cnt != 3:
                raise ValueError(f"{path}: non-triangular face")
            faces[i] = (a, b, c)
    return TriangleMesh(verts, faces, normals)
