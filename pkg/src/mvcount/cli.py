"""Command-line front end.

Subcommands: gen, masks, project, train, eval, render.  All outputs are
deterministic for a given seed and flag set (no timestamps are written), and
every numeric report value is printed with 6 significant digits.  Config
precedence is flag > pipeline-config file > built-in default.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import fileio, net, pipelines
from .density import normalization_map, render_density
from .geometry import GROUND_TO_IMAGE, build_correspondence, distance_map, view_ray_angle_map
from .maps import Map2D, write_map, write_pgm
from .rotation_select import quantize_angle_map
from .sampler import sample
from .scale_select import PyramidConfig, fixed_scale_map
from .scenesim import SimConfig, generate

DEFAULT_SEED = 2026


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pipeline", help="pipeline config file (JSON)")
    p.add_argument("--variant", choices=pipelines.VARIANTS + ("dmap",), help="fusion variant")
    p.add_argument("--seed", type=int, default=None, help=f"RNG seed (default {DEFAULT_SEED})")
    p.add_argument("--iters", type=int, default=None, help="override every training stage length")
    p.add_argument("--lr", type=float, default=None, help="override stage-1 learning rate")
    p.add_argument("--q", type=float, default=None, help="rotation quantization step, degrees")
    p.add_argument("--scales", type=int, default=None, help="pyramid scale count")
    p.add_argument("--zoom", type=float, default=None, help="pyramid inter-scale ratio (> 1)")
    p.add_argument("--channel-factor", type=float, default=None, help="channel width multiplier")


def _pipeline_config(args) -> pipelines.PipelineConfig:
    base: dict = {}
    if args.pipeline:
        base = fileio.load_pipeline_config(args.pipeline)
    overrides = {
        "variant": args.variant,
        "seed": args.seed,
        "rot_q": args.q,
        "n_scales": args.scales,
        "zoom": args.zoom,
        "channel_factor": getattr(args, "channel_factor", None),
    }
    for key, val in overrides.items():
        if val is not None and val != "dmap":
            base[key] = val
    base.setdefault("seed", DEFAULT_SEED)
    return pipelines.PipelineConfig.from_dict(base)


def _train_schedule(args, base: dict | None = None) -> pipelines.TrainSchedule:
    d = dict(base or {})
    if args.iters is not None:
        d.update(stage1_iters=args.iters, stage2_iters=args.iters, finetune_iters=args.iters)
    if args.lr is not None:
        d["lr_stage1"] = args.lr
    return pipelines.TrainSchedule.from_dict(d)


def cmd_gen(args) -> int:
    cfg = SimConfig(
        n_cameras=args.cams,
        n_frames=args.frames,
        people_min=args.people[0],
        people_max=args.people[1],
        n_occluders=args.occluders,
        image_width=args.image[0],
        image_height=args.image[1],
        grid_width=args.grid[0],
        grid_height=args.grid[1],
        cell_size=args.cell,
        elevation_deg=args.elevation,
        distance_factor=args.distance,
    )
    sim = generate(cfg, args.seed if args.seed is not None else DEFAULT_SEED, args.out)
    print(f"scene written to {args.out}: {cfg.n_frames} frames, {cfg.n_cameras} cameras, "
          f"{len(sim.train_indices)} train / {len(sim.test_indices)} test")
    return 0


def cmd_masks(args) -> int:
    ds = pipelines.SceneDataset(args.scene)
    os.makedirs(args.out, exist_ok=True)
    cfg = _pipeline_config(args)
    for cam in ds.cameras:
        if args.type == "distance":
            dm = distance_map(cam, ds.scene)
            write_map(os.path.join(args.out, f"distance_cam{cam.cam_id}.mv2d"), dm)
            write_pgm(os.path.join(args.out, f"distance_cam{cam.cam_id}.pgm"), np.where(dm.valid, dm.plane(), 0.0))
        elif args.type == "scale":
            dm = distance_map(cam, ds.scene)
            ref = distance_map(ds.cameras[0], ds.scene)
            d_r = float(ref.plane()[ds.cameras[0].image_height // 2, ds.cameras[0].image_width // 2])
            pconf = PyramidConfig(cfg.n_scales, cfg.zoom, cfg.n_scales // 2, d_r)
            masks = fixed_scale_map(dm, pconf)
            for i in range(cfg.n_scales):
                m = ((masks.indices == i) & masks.valid).astype(np.float64)
                write_map(os.path.join(args.out, f"scale{i}_cam{cam.cam_id}.mv2d"), Map2D(m[None], masks.valid, tag=cam.tag))
                write_pgm(os.path.join(args.out, f"scale{i}_cam{cam.cam_id}.pgm"), m, 0.0, 1.0)
        elif args.type == "rotation":
            ang = view_ray_angle_map(cam, ds.scene)
            write_map(os.path.join(args.out, f"angle_cam{cam.cam_id}.mv2d"), ang)
            write_pgm(os.path.join(args.out, f"angle_cam{cam.cam_id}.pgm"), ang.plane(), 0.0, 360.0)
            rm = quantize_angle_map(ang, cfg.rot_q, cam.cam_id)
            quant = np.where(rm.valid, rm.quantized, 0.0)
            write_map(os.path.join(args.out, f"rotation_cam{cam.cam_id}.mv2d"), Map2D(quant[None], rm.valid, tag="ground"))
            write_pgm(os.path.join(args.out, f"rotation_cam{cam.cam_id}.pgm"), quant, 0.0, 360.0)
    print(f"{args.type} masks written to {args.out}")
    return 0


def cmd_project(args) -> int:
    ds = pipelines.SceneDataset(args.scene)
    cam = next((c for c in ds.cameras if c.cam_id == args.cam), None)
    if cam is None:
        raise SystemExit(f"no camera {args.cam!r} in the scene (have {[c.cam_id for c in ds.cameras]})")
    cfg = _pipeline_config(args)
    fld = build_correspondence(cam, ds.scene, GROUND_TO_IMAGE)
    if args.u is not None and args.v is not None:
        u, v = args.u, args.v
    else:
        ok = np.argwhere(fld.valid)
        mid = ok[len(ok) // 2]
        v, u = float(fld.rows[mid[0], mid[1]]), float(fld.cols[mid[0], mid[1]])
    dens = render_density(np.array([[v, u]]), cfg.sigma_view, cam.image_height, cam.image_width, tag=cam.tag)
    projected = sample(dens, fld)
    print(f"source sum\t{_fmt(dens.total())}")
    print(f"projected sum\t{_fmt(projected.total())}")
    if args.normalize:
        norm = normalization_map(cam, ds.scene, cfg.sigma_view)
        normalized = projected.values * norm.weights.values * norm.weights.valid
        print(f"normalized sum\t{_fmt(float(normalized.sum()))}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_map(os.path.join(args.out, "source.mv2d"), dens)
        write_map(os.path.join(args.out, "projected.mv2d"), projected)
        write_pgm(os.path.join(args.out, "projected.pgm"), projected.plane())
    return 0


def cmd_train(args) -> int:
    ds = pipelines.SceneDataset(args.scene)
    cfg = _pipeline_config(args)
    sched_base = fileio.load_pipeline_config(args.pipeline).get("schedule", {}) if args.pipeline else {}
    sched = _train_schedule(args, sched_base)
    os.makedirs(args.out, exist_ok=True)
    if args.variant == "dmap":
        params = pipelines.train_dmap_baseline(ds, cfg, iters=sched.stage1_iters, lr=sched.lr_stage1)
        params.save(os.path.join(args.out, "dmap.mvnp"))
        rep = pipelines.evaluate_dmap_baseline(params, ds, cfg)
        text = f"variant\tdmap_weighted\nn_frames\t{rep['n_frames']}\nscene_mae\t{_fmt(rep['scene'][0])}\nscene_nae\t{_fmt(rep['scene'][1])}\n"
        with open(os.path.join(args.out, "report.txt"), "w") as f:
            f.write(text)
        print(text, end="")
        return 0
    pipe = pipelines.build_pipeline(ds.cameras, ds.scene, cfg)
    trace = pipelines.train_two_stage(pipe, ds, sched)
    pipelines.save_pipeline(
        pipe,
        os.path.join(args.out, f"{cfg.variant}.mvnp"),
        os.path.join(args.out, f"{cfg.variant}_config.json"),
    )
    with open(os.path.join(args.out, "loss_trace.txt"), "w") as f:
        for stage, losses in trace.items():
            for i, loss in enumerate(losses):
                f.write(f"{stage}\t{i}\t{_fmt(loss)}\n")
    final = trace["finetune"] or trace["stage2"] or trace["stage1"]
    print(f"trained {cfg.variant}: {sum(len(v) for v in trace.values())} steps, final loss {_fmt(final[-1]) if final else 'n/a'}")
    print(f"checkpoint written to {os.path.join(args.out, cfg.variant + '.mvnp')}")
    return 0


def cmd_eval(args) -> int:
    ds = pipelines.SceneDataset(args.scene)
    cfg = _pipeline_config(args)
    if args.variant == "dmap":
        params = net.Parameters.load(args.checkpoint)
        rep = pipelines.evaluate_dmap_baseline(params, ds, cfg)
        text = f"variant\tdmap_weighted\nn_frames\t{rep['n_frames']}\nscene_mae\t{_fmt(rep['scene'][0])}\nscene_nae\t{_fmt(rep['scene'][1])}\n"
    else:
        pipe = pipelines.load_pipeline(ds.cameras, ds.scene, cfg, args.checkpoint)
        rep = pipelines.evaluate(pipe, ds)
        text = pipelines.format_report(rep)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w") as f:
            f.write(text)
    print(text, end="")
    return 0


def cmd_render(args) -> int:
    ds = pipelines.SceneDataset(args.scene)
    cfg = _pipeline_config(args)
    pipe = pipelines.load_pipeline(ds.cameras, ds.scene, cfg, args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    for idx in args.frame:
        pred = pipelines.run(pipe, ds.frames(idx))
        gt = ds.scene_gt(idx)
        hi = max(float(pred.plane().max()), float(gt.plane().max()), 1e-9)
        write_pgm(os.path.join(args.out, f"{idx:04d}_pred.pgm"), pred.plane(), 0.0, hi)
        write_pgm(os.path.join(args.out, f"{idx:04d}_gt.pgm"), gt.plane(), 0.0, hi)
        write_map(os.path.join(args.out, f"{idx:04d}_pred.mv2d"), pred)
        print(f"frame {idx}: predicted count {_fmt(pred.total())}, true count {_fmt(gt.total())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvcount",
        description="Multi-view ground-plane crowd counting toolkit (synthetic scenes, "
        "projection/normalization, scale & rotation selection, trainable fusion).",
        epilog="Config precedence: command-line flag > --pipeline file > built-in default.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-view scene")
    p.add_argument("--out", required=True, help="scene directory to create")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--cams", type=int, default=3)
    p.add_argument("--people", type=int, nargs=2, default=(5, 20), metavar=("MIN", "MAX"))
    p.add_argument("--occluders", type=int, default=0)
    p.add_argument("--image", type=int, nargs=2, default=(96, 72), metavar=("W", "H"))
    p.add_argument("--grid", type=int, nargs=2, default=(32, 24), metavar=("W", "H"))
    p.add_argument("--cell", type=float, default=400.0, help="ground cell size, mm")
    p.add_argument("--elevation", type=float, default=50.0, help="camera elevation, degrees")
    p.add_argument("--distance", type=float, default=2.0, help="camera ring distance factor")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("masks", help="export distance/scale/rotation masks (+ PGM previews)")
    p.add_argument("--scene", required=True)
    p.add_argument("--type", choices=("distance", "scale", "rotation"), required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("project", help="project one Gaussian to the ground plane and report sums")
    p.add_argument("--scene", required=True)
    p.add_argument("--cam", required=True, help="camera id")
    p.add_argument("--u", type=float, default=None)
    p.add_argument("--v", type=float, default=None)
    p.add_argument("--normalize", action="store_true", help="also apply projection normalization")
    p.add_argument("--out", default=None)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train a fusion pipeline (or the dmap baseline)")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint: scene + per-camera MAE/NAE")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="write predicted vs ground-truth density heatmaps")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame", type=int, nargs="+", default=[0])
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
