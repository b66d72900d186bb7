"""Ray generation through the correction chain (image-plane deformation,
per-frame scale/translation refinement, pose deltas) and point sampling
along rays.

Sample depths t are z-depths: with the unnormalized plane vector rho
(z = -1), the world point at depth t is origin + t * R @ rho, whose
camera-space z is exactly -t.  This makes depth targets directly
comparable to the depth image.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import plane_vector
from .nets import Mlp, pe_forward, pe_output_dim

COARSE_STEP = 0.015625  # meters between coarse samples along a ray
FINE_COUNT = 16

LABEL_FS = 0
LABEL_SDF = 1
LABEL_EXCLUDED = 2


class RefinementParams:
    """Per-frame scale/translation of the image plane; identity at init."""

    def __init__(self, n_frames):
        self.s = np.ones((n_frames, 2))
        self.tau = np.zeros((n_frames, 2))
        self.gs_ = np.zeros((n_frames, 2))
        self.gtau = np.zeros((n_frames, 2))

    def zero_grads(self):
        self.gs_[...] = 0.0
        self.gtau[...] = 0.0


class PoseDeltas:
    """Per-frame axis-angle + translation increments, composed on the left
    of the base pose; zero delta reproduces the base pose exactly."""

    def __init__(self, n_frames):
        self.rot = np.zeros((n_frames, 3))
        self.trans = np.zeros((n_frames, 3))
        self.grot = np.zeros((n_frames, 3))
        self.gtrans = np.zeros((n_frames, 3))

    def zero_grads(self):
        self.grot[...] = 0.0
        self.gtrans[...] = 0.0


DEFORM_PE_LEVELS = 4


class DeformationField:
    """Global pixel-dependent offset on the image-plane (x, y) coordinates.

    Input: pixel coords normalized to [-1, 1]^2, positionally encoded;
    output: additive 2D offset.  Zero-initialized last layer makes the
    field start as the identity.
    """

    def __init__(self, rng, hidden=64):
        in_dim = pe_output_dim(2, DEFORM_PE_LEVELS)
        self.net = Mlp([in_dim, hidden, hidden, 2], rng, zero_last=True)

    def encode(self, u, v, intr):
        nu = 2.0 * np.asarray(u, dtype=np.float64) / (intr.width - 1) - 1.0
        nv = 2.0 * np.asarray(v, dtype=np.float64) / (intr.height - 1) - 1.0
        return pe_forward(np.stack([nu, nv], axis=-1), DEFORM_PE_LEVELS)

    def forward(self, u, v, intr):
        out, cache = self.net.forward(self.encode(u, v, intr))
        return out, cache


def rodrigues(r):
    """Axis-angle 3-vector -> rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    K = np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(theta) / theta
    c = (1.0 - np.cos(theta)) / theta ** 2
    return np.eye(3) + s * K + c * (K @ K)


def _hat(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def rodrigues_jacobian(r):
    """dR/dr_i for i = 0, 1, 2 as a (3, 3, 3) array (first axis = i)."""
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(r @ r)
    R = rodrigues(r)
    out = np.empty((3, 3, 3))
    if theta2 < 1e-16:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out[i] = _hat(e)
        return out
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        v = np.cross(r, (np.eye(3) - R) @ e)
        out[i] = ((r[i] * _hat(r) + _hat(v)) / theta2) @ R
    return out


def pixel_to_plane(u, v, intr):
    """Unrefined image-plane vector for pixel(s) (u, v)."""
    return plane_vector(u, v, intr)


def apply_deformation(u, v, rho, deform, intr):
    """Add the deformation field's 2D offset to the plane (x, y) coords."""
    rho = np.atleast_2d(rho).copy()
    off, _ = deform.forward(u, v, intr)
    rho[:, :2] += off
    return rho


def refine_plane(rho, s, tau):
    """rho_hat = diag(sx, sy, 1) @ (rho + (tau_x, tau_y, 0))."""
    rho = np.asarray(rho, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    out = rho.copy()
    out[..., 0] = s[..., 0] * (rho[..., 0] + tau[..., 0])
    out[..., 1] = s[..., 1] * (rho[..., 1] + tau[..., 1])
    return out


def refined_direction(rho_hat):
    """Unit casting direction from the refined plane vector."""
    rho_hat = np.asarray(rho_hat, dtype=np.float64)
    n = np.linalg.norm(rho_hat, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero plane vector")
    return rho_hat / n


def make_ray(u, v, intr, pose, s=(1.0, 1.0), tau=(0.0, 0.0),
             delta_rot=None, delta_trans=None, deform=None):
    """Full correction chain for one or more pixels of one frame.

    Returns (origin (3,), unit directions (N, 3), plane vectors (N, 3))
    where the plane vectors keep z = -1 for z-depth parameterization.
    """
    u = np.atleast_1d(u)
    v = np.atleast_1d(v)
    rho = pixel_to_plane(u, v, intr)
    if deform is not None:
        rho = apply_deformation(u, v, rho, deform, intr)
    rho_hat = refine_plane(rho, np.asarray(s), np.asarray(tau))
    if delta_rot is not None or delta_trans is not None:
        Rd = rodrigues(np.zeros(3) if delta_rot is None else delta_rot)
        td = np.zeros(3) if delta_trans is None else np.asarray(delta_trans)
        R = Rd @ pose.rotation
        origin = Rd @ pose.translation + td
    else:
        R = pose.rotation
        origin = pose.translation
    d_world = rho_hat @ R.T
    return origin, refined_direction(d_world), d_world


def sample_coarse(ray_length, step=COARSE_STEP, rng=None):
    """Depth lattice k * step, k >= 1, t <= ray_length; optional jitter of
    +-step/2 per sample when an rng is given."""
    if ray_length <= 0:
        raise ValueError("ray length must be positive")
    n = int(np.floor(ray_length / step + 1e-9))
    t = step * np.arange(1, n + 1, dtype=np.float64)
    if rng is not None:
        t = t + rng.uniform(-step / 2, step / 2, size=n)
        t = np.clip(t, step / 2, ray_length)
    return t


def classify_samples(t, d_obs, tr):
    """Partition coarse samples into free-space / sdf / excluded.

    Returns (labels, targets); targets are d_obs - t, meaningful for the
    sdf-labeled samples only.
    """
    t = np.asarray(t, dtype=np.float64)
    target = d_obs - t
    labels = np.full(t.shape, LABEL_EXCLUDED, dtype=np.int8)
    labels[t < d_obs - tr] = LABEL_FS
    labels[np.abs(target) <= tr] = LABEL_SDF
    return labels, target


def sample_fine(t, d_hat, tr, count=FINE_COUNT):
    """Depths around the first zero crossing of the predicted SDF.

    Returns an empty array when no sign change exists along the ray.
    """
    t = np.asarray(t, dtype=np.float64)
    d_hat = np.asarray(d_hat, dtype=np.float64)
    sign = np.sign(d_hat)
    flips = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
    if len(flips) == 0:
        return np.empty(0)
    i = flips[0]
    # linear interpolation of the crossing depth
    t_star = t[i] + (t[i + 1] - t[i]) * d_hat[i] / (d_hat[i] - d_hat[i + 1])
    fine = np.linspace(t_star - tr, t_star + tr, count)
    return np.clip(fine, t[0], t[-1])
