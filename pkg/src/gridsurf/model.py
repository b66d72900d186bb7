"""Scene model (grid + decoders + per-frame correction parameters) and the
differentiable evaluation of the training loss over a ray batch.

The backward pass is written out explicitly: rendering loss -> color /
sdf decoders -> interpolated features and sample positions -> ray
directions -> refinement, deformation and pose-delta parameters.
Sample depths t and the free-space/sdf partition are treated as fixed
once a batch is built; positions are recomputed differentiably from them.
"""

import numpy as np

from .geometry import plane_vector
from .grid import FeatureGrid
from .nets import Adam, EmbeddingTable, Mlp, pe_backward, pe_forward, pe_output_dim
from .rays import (LABEL_EXCLUDED, LABEL_FS, LABEL_SDF, DeformationField,
                   PoseDeltas, RefinementParams, classify_samples, rodrigues,
                   rodrigues_jacobian, sample_coarse, sample_fine)
from .render import (loss_reg, loss_rgb, nested_mse, render_color,
                     render_weight, render_weight_grad, total_loss)


class SampleBatch:
    """Flat per-ray and per-sample arrays for one training batch."""

    def __init__(self, ray_frame, ray_u, ray_v, ray_color, ray_d_obs,
                 sample_ray, sample_t, labels, targets):
        self.ray_frame = ray_frame
        self.ray_u = ray_u
        self.ray_v = ray_v
        self.ray_color = ray_color
        self.ray_d_obs = ray_d_obs
        self.sample_ray = sample_ray
        self.sample_t = sample_t
        self.labels = labels
        self.targets = targets

    @property
    def n_rays(self):
        return len(self.ray_frame)


class SceneModel:
    """All trainable state for one scene."""

    def __init__(self, frames, bounds, cfg, rng):
        self.frames = frames
        self.intr = frames.intrinsics
        self.bounds = bounds
        self.cfg = cfg
        n = len(frames)
        self.grid = FeatureGrid(bounds, cfg.gs, cfg.F)
        # SDF decoder bias starts at +tr: the untrained scene reads as free space
        self.mlp_d = Mlp([cfg.F, cfg.hidden, cfg.hidden, 1], rng,
                         out_bias=cfg.tr)
        color_in = cfg.F + pe_output_dim(3, cfg.pe_levels) + cfg.embed_dim
        self.mlp_c = Mlp([color_in, cfg.hidden, cfg.hidden, 3], rng,
                         output_activation="sigmoid")
        self.embed = EmbeddingTable(n, cfg.embed_dim)
        self.refine = RefinementParams(n)
        self.deltas = PoseDeltas(n)
        self.deform = DeformationField(rng, hidden=cfg.deform_hidden)
        self.adam = Adam(lr0=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                         decay_every=cfg.decay_every)
        self.iteration = 0
        self.rng = rng

    # ---- parameter bookkeeping -------------------------------------------

    def _mlp_entries(self, tag, net):
        out = {}
        for i, (w, b, gw, gb) in enumerate(zip(net.W, net.b, net.gW, net.gb)):
            out[f"{tag}.W{i}"] = (w, gw)
            out[f"{tag}.b{i}"] = (b, gb)
        return out

    def param_entries(self, groups=None):
        """(param, grad) pairs by name, optionally restricted to groups."""
        cfg = self.cfg
        entries = {"grid": (self.grid.features, self.grid.grads)}
        entries.update(self._mlp_entries("mlp_d", self.mlp_d))
        entries.update(self._mlp_entries("mlp_c", self.mlp_c))
        entries["embed"] = (self.embed.values, self.embed.grads)
        if cfg.enable_refinement:
            entries["refine.s"] = (self.refine.s, self.refine.gs_)
            entries["refine.tau"] = (self.refine.tau, self.refine.gtau)
        if cfg.enable_pose_opt:
            entries["pose.rot"] = (self.deltas.rot, self.deltas.grot)
            entries["pose.trans"] = (self.deltas.trans, self.deltas.gtrans)
        if cfg.enable_deformation:
            entries.update(self._mlp_entries("deform", self.deform.net))
        if groups is not None:
            entries = {k: v for k, v in entries.items()
                       if any(k == g or k.startswith(g + ".") for g in groups)}
        return entries

    def zero_grads(self):
        self.grid.zero_grads()
        self.mlp_d.zero_grads()
        self.mlp_c.zero_grads()
        self.embed.zero_grads()
        self.refine.zero_grads()
        self.deltas.zero_grads()
        self.deform.net.zero_grads()

    def step(self, groups=None):
        entries = self.param_entries(groups)
        params = {k: p for k, (p, g) in entries.items()}
        grads = {k: g for k, (p, g) in entries.items()}
        self.adam.step(params, grads, self.iteration)
        self.iteration += 1

    # ---- frame poses with deltas -----------------------------------------

    def frame_rotations(self):
        """Per-frame corrected rotation, origin, and delta rotation."""
        n = len(self.frames)
        R = np.empty((n, 3, 3))
        o = np.empty((n, 3))
        Rd_all = np.empty((n, 3, 3))
        for i, frame in enumerate(self.frames):
            if self.cfg.enable_pose_opt:
                Rd = rodrigues(self.deltas.rot[i])
                td = self.deltas.trans[i]
            else:
                Rd = np.eye(3)
                td = np.zeros(3)
            Rd_all[i] = Rd
            R[i] = Rd @ frame.pose.rotation
            o[i] = Rd @ frame.pose.translation + td
        return R, o, Rd_all

    # ---- batch construction ----------------------------------------------

    def build_batch(self, rng, n_rays, ray_length, with_fine=False,
                    jitter=False):
        """Uniformly sample pixels across frames and lay out sample depths."""
        cfg = self.cfg
        n_frames = len(self.frames)
        f = rng.integers(0, n_frames, size=n_rays)
        u = rng.integers(0, self.intr.width, size=n_rays).astype(np.float64)
        v = rng.integers(0, self.intr.height, size=n_rays).astype(np.float64)
        color = np.empty((n_rays, 3))
        d_obs = np.empty(n_rays)
        for b in range(n_rays):
            frame = self.frames[f[b]]
            color[b] = frame.color[int(v[b]), int(u[b])]
            d_obs[b] = frame.depth[int(v[b]), int(u[b])]

        sample_ray = []
        sample_t = []
        labels = []
        targets = []
        fine_rays = {}
        if with_fine:
            fine_rays = self._find_crossings(f, u, v, ray_length)
        for b in range(n_rays):
            t = sample_coarse(ray_length, step=cfg.coarse_step,
                              rng=rng if jitter else None)
            if with_fine and b in fine_rays:
                t = np.sort(np.concatenate([t, fine_rays[b]]))
            if d_obs[b] > 0:
                lab, tgt = classify_samples(t, d_obs[b], cfg.tr)
            else:
                lab = np.full(t.shape, LABEL_EXCLUDED, dtype=np.int8)
                tgt = np.zeros_like(t)
            sample_ray.append(np.full(len(t), b, dtype=np.int64))
            sample_t.append(t)
            labels.append(lab)
            targets.append(tgt)
        return SampleBatch(f, u, v, color, d_obs,
                           np.concatenate(sample_ray),
                           np.concatenate(sample_t),
                           np.concatenate(labels),
                           np.concatenate(targets))

    def _find_crossings(self, f, u, v, ray_length):
        """Fine sample depths per ray, from the current coarse predictions."""
        cfg = self.cfg
        t = sample_coarse(ray_length, step=cfg.coarse_step)
        probe = SampleBatch(
            f, u, v, np.zeros((len(f), 3)), np.zeros(len(f)),
            np.repeat(np.arange(len(f)), len(t)),
            np.tile(t, len(f)),
            np.full(len(f) * len(t), LABEL_EXCLUDED, dtype=np.int8),
            np.zeros(len(f) * len(t)))
        d_hat, kept, ray_of = self.predict_sdf_along(probe)
        out = {}
        for b in range(len(f)):
            sel = ray_of == b
            if not sel.any():
                continue
            fine = sample_fine(probe.sample_t[kept][sel], d_hat[sel], cfg.tr,
                               count=cfg.fine_count)
            if len(fine):
                out[b] = fine
        return out

    def predict_sdf_along(self, batch):
        """Non-differentiable SDF forward along a batch (for fine sampling)."""
        R, o, _ = self.frame_rotations()
        rho2, _, _ = self._plane_chain(batch)
        d_world = np.einsum("bij,bj->bi", R[batch.ray_frame], rho2)
        p = (o[batch.ray_frame][batch.sample_ray]
             + batch.sample_t[:, None] * d_world[batch.sample_ray])
        inb = np.all((p >= self.bounds.min_corner)
                     & (p <= self.bounds.max_corner), axis=-1)
        phi, _ = self.grid.interpolate(p[inb])
        d_hat, _ = self.mlp_d.forward(phi)
        return d_hat[:, 0], inb, batch.sample_ray[inb]

    def _plane_chain(self, batch):
        """Deformed + refined plane vectors for a batch (forward only here)."""
        cfg = self.cfg
        rho0 = plane_vector(batch.ray_u, batch.ray_v, self.intr)
        cache_def = None
        if cfg.enable_deformation:
            off, cache_def = self.deform.forward(batch.ray_u, batch.ray_v,
                                                 self.intr)
            rho1 = rho0.copy()
            rho1[:, :2] += off
        else:
            rho1 = rho0
        if cfg.enable_refinement:
            s = self.refine.s[batch.ray_frame]
            tau = self.refine.tau[batch.ray_frame]
        else:
            s = np.ones((batch.n_rays, 2))
            tau = np.zeros((batch.n_rays, 2))
        rho2 = rho1.copy()
        rho2[:, 0] = s[:, 0] * (rho1[:, 0] + tau[:, 0])
        rho2[:, 1] = s[:, 1] * (rho1[:, 1] + tau[:, 1])
        return rho2, (rho1, s, tau), cache_def

    # ---- differentiable loss ---------------------------------------------

    def evaluate_batch(self, batch, accumulate=True):
        """Total loss over a batch; gradients accumulate on all live groups.

        Returns (total, dict of unweighted loss parts).
        """
        cfg = self.cfg
        lw = cfg.loss_weights
        n_frames = len(self.frames)
        B = batch.n_rays
        f = batch.ray_frame

        # forward: correction chain
        rho2, (rho1, s, tau), cache_def = self._plane_chain(batch)
        R, o, Rd_all = self.frame_rotations()
        R_ray = R[f]
        o_ray = o[f]
        d_world = np.einsum("bij,bj->bi", R_ray, rho2)
        norm = np.linalg.norm(d_world, axis=-1)
        d_unit = d_world / norm[:, None]

        # forward: sample points (drop the ones outside the grid)
        sr = batch.sample_ray
        p = o_ray[sr] + batch.sample_t[:, None] * d_world[sr]
        inb = np.all((p >= self.bounds.min_corner)
                     & (p <= self.bounds.max_corner), axis=-1)
        sr = sr[inb]
        t_kept = batch.sample_t[inb]
        labels = batch.labels[inb]
        targets = batch.targets[inb]

        phi, stencil = self.grid.interpolate(p[inb])
        d_hat_col, cache_d = self.mlp_d.forward(phi)
        d_hat = d_hat_col[:, 0]

        lam = pe_forward(d_unit, cfg.pe_levels)
        xc = np.concatenate([phi, lam[sr], self.embed.values[f[sr]]], axis=-1)
        c_pred, cache_c = self.mlp_c.forward(xc)

        omega = render_weight(d_hat, cfg.tr)
        rendered, wsum, low_conf = render_color(omega, c_pred, sr, B)

        # forward: loss parts
        l_fs, g_fs = nested_mse(d_hat, cfg.tr, labels == LABEL_FS, sr, B)
        l_sdf, g_sdf = nested_mse(d_hat, targets, labels == LABEL_SDF, sr, B)
        l_rgb, g_rend = loss_rgb(rendered, batch.ray_color, ~low_conf)
        deform_w = self.deform.net.W if cfg.enable_deformation else []
        l_reg, g_xi, g_s, g_tau, g_w = loss_reg(
            self.embed.values, self.refine.s, self.refine.tau, f, deform_w)
        parts = {"fs": l_fs, "sdf": l_sdf, "rgb": l_rgb, "reg": l_reg}
        total = total_loss((l_fs, l_sdf, l_rgb, l_reg), lw)
        if not accumulate:
            return total, parts

        # backward: rendering -> per-sample color and weight grads
        g_rend = lw.rgb * g_rend
        denom = np.where(low_conf, 1.0, wsum)[sr]
        d_omega = np.einsum("sc,sc->s", g_rend[sr],
                            (c_pred - rendered[sr])) / denom
        d_cpred = g_rend[sr] * (omega / denom)[:, None]
        d_omega[low_conf[sr]] = 0.0
        d_cpred[low_conf[sr]] = 0.0

        d_dhat = lw.fs * g_fs + lw.sdf * g_sdf + d_omega * render_weight_grad(
            d_hat, cfg.tr)

        # backward: decoders
        dxc = self.mlp_c.backward(cache_c, d_cpred)
        F = cfg.F
        npe = lam.shape[1]
        dphi = dxc[:, :F] + self.mlp_d.backward(cache_d, d_dhat[:, None])
        dlam_s = dxc[:, F:F + npe]
        dxi_s = dxc[:, F + npe:]
        np.add.at(self.embed.grads, f[sr], dxi_s)
        self.embed.grads += lw.reg * g_xi

        # backward: grid read
        self.grid.interpolate_backward(stencil, dphi)
        dp = self.grid.position_gradient(stencil, dphi)

        # backward: positions -> ray origin/direction
        d_o_ray = np.zeros((B, 3))
        d_dworld = np.zeros((B, 3))
        np.add.at(d_o_ray, sr, dp)
        np.add.at(d_dworld, sr, t_kept[:, None] * dp)

        # backward: positional-encoded direction (per-ray)
        dlam_ray = np.zeros((B, npe))
        np.add.at(dlam_ray, sr, dlam_s)
        d_dunit = pe_backward(d_unit, cfg.pe_levels, dlam_ray)
        proj = np.einsum("bi,bi->b", d_unit, d_dunit)
        d_dworld += (d_dunit - d_unit * proj[:, None]) / norm[:, None]

        # backward: rotation application
        d_rho2 = np.einsum("bij,bi->bj", R_ray, d_dworld)
        if cfg.enable_pose_opt:
            dR_frame = np.zeros((n_frames, 3, 3))
            np.add.at(dR_frame, f, np.einsum("bi,bj->bij", d_dworld, rho2))
            d_o_frame = np.zeros((n_frames, 3))
            np.add.at(d_o_frame, f, d_o_ray)
            for i in range(n_frames):
                Rb = self.frames[i].pose.rotation
                tb = self.frames[i].pose.translation
                dRd = dR_frame[i] @ Rb.T + np.outer(d_o_frame[i], tb)
                J = rodrigues_jacobian(self.deltas.rot[i])
                self.deltas.grot[i] += np.einsum("ijk,jk->i", J, dRd)
                self.deltas.gtrans[i] += d_o_frame[i]

        # backward: refinement
        if cfg.enable_refinement:
            ds_ray = d_rho2[:, :2] * (rho1[:, :2] + tau)
            dtau_ray = d_rho2[:, :2] * s
            np.add.at(self.refine.gs_, f, ds_ray)
            np.add.at(self.refine.gtau, f, dtau_ray)
            self.refine.gs_ += lw.reg * g_s
            self.refine.gtau += lw.reg * g_tau

        # backward: deformation field
        if cfg.enable_deformation:
            d_rho1 = d_rho2[:, :2] * s
            self.deform.net.backward(cache_def, d_rho1)
            for gw, w in zip(self.deform.net.gW, g_w):
                gw += lw.reg * w

        return total, parts

    # ---- pretraining loss -------------------------------------------------

    def evaluate_pretrain(self, centers, fused_sdf, accumulate=True):
        """MSE of the decoded SDF vs fused targets at cell-center points."""
        from .render import loss_pre
        phi, stencil = self.grid.interpolate(centers)
        d_hat, cache = self.mlp_d.forward(phi)
        loss, g = loss_pre(d_hat[:, 0], fused_sdf)
        if accumulate:
            dphi = self.mlp_d.backward(cache, g[:, None])
            self.grid.interpolate_backward(stencil, dphi)
        return loss

    # ---- inference --------------------------------------------------------

    def sdf_at(self, p, chunk=200000):
        """Decoded SDF at world points; +tr outside the grid bounds."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        out = np.full(p.shape[0], self.cfg.tr)
        inb = np.all((p >= self.bounds.min_corner)
                     & (p <= self.bounds.max_corner), axis=-1)
        idx = np.nonzero(inb)[0]
        for lo in range(0, len(idx), chunk):
            sel = idx[lo:lo + chunk]
            phi, _ = self.grid.interpolate(p[sel])
            d, _ = self.mlp_d.forward(phi)
            out[sel] = d[:, 0]
        return out
