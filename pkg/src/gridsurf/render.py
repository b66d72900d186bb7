"""SDF-to-weight conversion, normalized color rendering along rays, and
the training losses with their gradients."""

from dataclasses import dataclass

import numpy as np

EPS_WEIGHT = 1e-8


@dataclass
class LossWeights:
    fs: float = 10.0
    sdf: float = 6e3
    rgb: float = 0.5
    reg: float = 0.1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def render_weight(d_hat, tr):
    """Bell-shaped rendering weight sigma(D/tr) * sigma(-D/tr); peak 0.25."""
    if tr <= 0:
        raise ValueError("truncation distance must be positive")
    a = np.asarray(d_hat, dtype=np.float64) / tr
    return sigmoid(a) * sigmoid(-a)


def render_weight_grad(d_hat, tr):
    """d omega / d D_hat."""
    a = np.asarray(d_hat, dtype=np.float64) / tr
    sp = sigmoid(a)
    sm = sigmoid(-a)
    return sp * sm * (sm - sp) / tr


def render_color(weights, colors, ray_idx, n_rays):
    """Per-ray normalized weighted color sum.

    Returns (rendered (n_rays, 3), weight_sums (n_rays,), low_conf (n_rays,)).
    Rays whose weights sum below EPS_WEIGHT fall back to the plain mean and
    are flagged low-confidence (they must be excluded from the rgb loss).
    Rays with no samples at all are flagged too and render as zeros.
    """
    weights = np.asarray(weights, dtype=np.float64)
    colors = np.atleast_2d(colors)
    if colors.shape[0] == 0:
        raise ValueError("no samples to render")
    wsum = np.bincount(ray_idx, weights=weights, minlength=n_rays)
    count = np.bincount(ray_idx, minlength=n_rays)
    csum = np.stack([np.bincount(ray_idx, weights=colors[:, c],
                                 minlength=n_rays) for c in range(3)], axis=-1)
    low_conf = wsum < EPS_WEIGHT
    denom = np.where(low_conf, 1.0, wsum)
    # normalize per sample before summing so a single-sample ray renders
    # its own color exactly (w / w == 1)
    wn = weights / denom[ray_idx]
    out = np.stack([np.bincount(ray_idx, weights=wn * colors[:, c],
                                minlength=n_rays) for c in range(3)], axis=-1)
    fallback = csum / np.maximum(count, 1)[:, None]
    out[low_conf] = fallback[low_conf]
    return out, wsum, low_conf | (count == 0)


def nested_mse(values, targets, mask, ray_idx, n_rays):
    """Per-ray mean of squared error over masked samples, then mean over
    rays that own at least one masked sample.

    Returns (loss, d_loss/d_values); rays without masked samples are
    skipped (contribute nothing to either).
    """
    values = np.asarray(values, dtype=np.float64)
    err = np.where(mask, values - targets, 0.0)
    count = np.bincount(ray_idx, weights=mask.astype(np.float64),
                        minlength=n_rays)
    active = count > 0
    n_active = int(active.sum())
    grad = np.zeros_like(values)
    if n_active == 0:
        return 0.0, grad
    per_ray = np.bincount(ray_idx, weights=err * err, minlength=n_rays)
    per_ray = np.where(active, per_ray / np.maximum(count, 1), 0.0)
    loss = per_ray.sum() / n_active
    scale = np.where(active, 1.0 / (np.maximum(count, 1) * n_active), 0.0)
    grad = 2.0 * err * scale[ray_idx]
    return float(loss), grad


def loss_pre(d_pred, d_fused):
    """Mean squared error of predicted vs fused SDF at sampled cell centers."""
    d_pred = np.asarray(d_pred, dtype=np.float64)
    if d_pred.size == 0:
        raise ValueError("empty pretraining batch")
    err = d_pred - np.asarray(d_fused, dtype=np.float64)
    return float(np.mean(err * err)), 2.0 * err / err.size


def loss_rgb(rendered, observed, include):
    """Mean over included rays of channel-summed squared color error."""
    include = np.asarray(include, dtype=bool)
    n = int(include.sum())
    grad = np.zeros_like(rendered)
    if n == 0:
        return 0.0, grad
    err = np.where(include[:, None], rendered - observed, 0.0)
    loss = float((err * err).sum() / n)
    grad = 2.0 * err / n
    return loss, grad


def loss_reg(xi, s, tau, ray_frames, deform_weights):
    """Regularizers on embeddings, refinement parameters and the
    deformation net weights.

    Returns (loss, d/dxi, d/ds over frames, d/dtau over frames,
    [d/dw for each deformation weight array]).  The refinement part is a
    mean over batch rays of the owning frame's parameters, so its gradient
    scales with how often each frame was sampled.
    """
    xi = np.asarray(xi, dtype=np.float64)
    n_frames = xi.shape[0]
    r_embed = float(np.mean(xi * xi)) if xi.size else 0.0
    g_xi = 2.0 * xi / xi.size if xi.size else np.zeros_like(xi)

    B = len(ray_frames)
    sr = s[ray_frames]
    taur = tau[ray_frames]
    r_refine = float((((sr - 1.0) ** 2).sum() + (taur ** 2).sum()) / B)
    counts = np.bincount(ray_frames, minlength=n_frames).astype(np.float64)
    g_s = 2.0 * (s - 1.0) * counts[:, None] / B
    g_tau = 2.0 * tau * counts[:, None] / B

    n_w = sum(w.size for w in deform_weights)
    if n_w:
        r_deform = float(sum((w * w).sum() for w in deform_weights) / n_w)
        g_w = [2.0 * w / n_w for w in deform_weights]
    else:
        r_deform = 0.0
        g_w = []
    return r_embed + r_refine + r_deform, g_xi, g_s, g_tau, g_w


def total_loss(parts, lw):
    """Weighted sum of (fs, sdf, rgb, reg) loss parts."""
    return (lw.fs * parts[0] + lw.sdf * parts[1]
            + lw.rgb * parts[2] + lw.reg * parts[3])
