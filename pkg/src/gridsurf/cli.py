"""Command-line interface: synth / fuse / train / extract / eval."""

import argparse
import sys

import numpy as np

from . import mesh as mesh_mod
from . import scenes, trainer, tsdf
from .geometry import BoundingBox, GridDims, compute_scene_bounds, grid_dims
from .grid import FeatureGrid
from .nets import Mlp


def cmd_synth(args):
    scene = scenes.make_scene(args.scene, n_frames=args.frames,
                              width=args.width, height=args.height,
                              seed=args.seed)
    for spec in args.perturb_frame or []:
        idx, params = spec.split(":")
        sx, sy, tx, ty = (float(x) for x in params.split(","))
        scenes.perturb_intrinsics(scene, int(idx), (sx, sy), (tx, ty))
    rng = np.random.default_rng(args.seed)
    if args.noise_preset == "kinect":
        frames = scenes.generate_dataset(scene, rng=rng, hole_fraction=0.02,
                                         sigma0=0.001)
    else:
        frames = scenes.generate_dataset(scene)
    scenes.save_dataset(frames, args.out)
    if args.gt_mesh:
        mesh_mod.save_ply(args.gt_mesh,
                          scene.ground_truth_mesh(resolution=args.gt_resolution))
    print(f"wrote {len(frames)} frames to {args.out}")


def cmd_fuse(args):
    frames = scenes.load_dataset(args.data)
    margin = args.margin if args.margin > 0 else 2.0 * args.tr
    bounds = compute_scene_bounds(frames, margin)
    dims = grid_dims(bounds, args.gs)
    vol = tsdf.run_fusion(frames, bounds, dims, args.gs, args.tr)
    tsdf.save_volume(args.out, vol)
    print(f"fused {len(frames)} frames into {args.out} "
          f"(grid {dims.nx}x{dims.ny}x{dims.nz})")
    if args.mesh:
        m = mesh_mod.extract_mesh(
            lambda p: tsdf.query_tsdf(vol, p)[0], bounds,
            resolution=args.resolution,
            observed_sampler=lambda p: tsdf.query_tsdf(vol, p)[1])
        mesh_mod.save_ply(args.mesh, m)
        print(f"wrote mesh with {len(m.triangles)} triangles to {args.mesh}")


def cmd_train(args):
    frames = scenes.load_dataset(args.data)
    cfg = trainer.load_config(args.config) if args.config else trainer.TrainConfig()
    if args.scale is not None:
        from dataclasses import replace
        cfg = replace(cfg, scale=args.scale)
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    for name in args.ablate or []:
        cfg = cfg.apply_ablation(name)
    model, _ = trainer.run_schedule(frames, cfg, log_path=args.log,
                                    checkpoint_path=args.out)
    print(f"trained {model.iteration} iterations; checkpoint at {args.out}")


def _model_sampler_from_checkpoint(path):
    sections = trainer.read_checkpoint(path)
    g = sections["grid"]
    dims = GridDims(*(int(x) for x in g["dims"]))
    bounds = BoundingBox(g["bounds"][:3], g["bounds"][3:])
    grid = FeatureGrid(bounds, float(g["gs"][0]), int(g["F"][0]), dims=dims)
    grid.features = g["features"].copy()
    d = sections["mlp_d"]
    n_layers = len([k for k in d if k.startswith("W")])
    sizes = [d["W0"].shape[0]] + [d[f"W{i}"].shape[1] for i in range(n_layers)]
    net = Mlp(sizes, np.random.default_rng(0))
    for i in range(n_layers):
        net.W[i][...] = d[f"W{i}"]
        net.b[i][...] = d[f"b{i}"]

    def sampler(p, chunk=200000):
        p = np.clip(p, bounds.min_corner, bounds.max_corner)
        out = np.empty(len(p))
        for lo in range(0, len(p), chunk):
            phi, _ = grid.interpolate(p[lo:lo + chunk])
            out[lo:lo + chunk] = net.forward(phi)[0][:, 0]
        return out

    return sampler, bounds


def cmd_extract(args):
    sampler, bounds = _model_sampler_from_checkpoint(args.ckpt)
    m = mesh_mod.extract_mesh(sampler, bounds, resolution=args.resolution)
    mesh_mod.save_ply(args.out, m)
    print(f"wrote mesh with {len(m.triangles)} triangles to {args.out}")


def cmd_eval(args):
    pred = mesh_mod.load_ply(args.pred)
    gt = mesh_mod.load_ply(args.gt)
    density = 1.0 / args.sample_res ** 2
    report = mesh_mod.evaluate_meshes(
        pred, gt, fscore_tau=args.fscore_tau, iou_edge=args.iou_edge,
        density=density, rng=np.random.default_rng(args.seed))
    print(report.table(), end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.record_line() + "\n")
            fh.write(report.table())


def build_parser():
    ap = argparse.ArgumentParser(prog="gridsurf")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGB-D dataset")
    p.add_argument("--scene", choices=["box", "cluttered"], default="box")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=60)
    p.add_argument("--noise-preset", choices=["none", "kinect"], default="none")
    p.add_argument("--perturb-frame", action="append", metavar="I:sx,sy,tx,ty")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--gt-mesh", help="also write the ground-truth mesh (PLY)")
    p.add_argument("--gt-resolution", type=float, default=0.01)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", help="classical TSDF fusion")
    p.add_argument("--data", required=True)
    p.add_argument("--gs", type=float, default=0.1)
    p.add_argument("--tr", type=float, default=0.05)
    p.add_argument("--margin", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--mesh")
    p.add_argument("--resolution", type=float, default=0.01)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="three-phase training")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", action="append",
                   choices=["no-refine", "no-prior", "no-deform", "no-pose"])
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="marching-cubes mesh from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--resolution", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="mesh-vs-mesh evaluation metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--fscore-tau", type=float, default=0.05)
    p.add_argument("--iou-edge", type=float, default=0.10)
    p.add_argument("--sample-res", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
