"""Command-line entry points.

Exit codes: 0 success, 2 usage problems (bad flags, unreadable inputs),
1 runtime failures (solver/generation/computation errors), each reported as a
single diagnostic line on stderr.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as configmod
from . import depthio, fusion, geometry, metrics, perturb, scene, training
from .errors import ComputationError, GenerationError, SolverError
from .network import (NetworkConfig, depth_net_forward, init_parameters)

_PRESETS = {"ours": frozenset({2}), "ours-robust": frozenset({1, 2, 3, 4}),
            "mono": frozenset()}


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return h, w
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="epidepth",
        description="Depth from posed views via epipolar attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(48, 64))
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--spheres", type=int, default=4)
    p.add_argument("--baseline", type=float, default=0.8)
    p.add_argument("--min-overlap", type=float, default=0.5)
    p.add_argument("--focal", type=float, default=60.0)
    p.add_argument("--look-distance", type=float, default=4.0,
                   help="distance from the source camera to the ring's gaze point")

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML file with network/train sections")
    p.add_argument("--preset", choices=sorted(_PRESETS),
                   help="attention-site preset overriding the config file")
    p.add_argument("--steps", type=int, help="override train.steps")

    p = sub.add_parser("eval", help="score predicted depth maps against a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--pred", required=True, help="directory of pred_*.bin maps")
    p.add_argument("--csv", help="also write the table as CSV")
    p.add_argument("--scale-aligned", action="store_true")

    p = sub.add_parser("perturb", help="corrupt reference poses via noisy PnP")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, required=True, help="pixel noise bound")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--accept-px", type=float, default=10.0)

    p = sub.add_parser("fuse", help="fuse depth maps into a PLY point cloud")
    p.add_argument("--scene", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-views", type=int, default=2)
    p.add_argument("--consistency-px", type=float, default=1.0)
    p.add_argument("--rel-depth-tol", type=float, default=0.01)
    p.add_argument("--max-sigma", type=float,
                   help="drop pixels above this confidence bound")

    p = sub.add_parser("attn-dump", help="write attention weights as CSV")
    p.add_argument("--scene", required=True)
    p.add_argument("--train-dir", required=True,
                   help="output dir of a train run (checkpoint + network.yaml)")
    p.add_argument("--out", required=True)
    p.add_argument("--site", type=int, help="attention site (default: lowest)")
    p.add_argument("--source", type=int, default=0)

    p = sub.add_parser("depth-preview", help="write a 16-bit PNG of a depth map")
    p.add_argument("--depth", required=True)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------- commands ---

def _cmd_gen_scene(args):
    params = scene.SceneParams(image_size=args.size, view_count=args.views,
                               sphere_count=args.spheres, baseline=args.baseline,
                               min_overlap=args.min_overlap, focal=args.focal,
                               look_distance=args.look_distance)
    sc = scene.generate_scene(params, args.seed)
    scene.save_scene(args.out, sc)
    print(f"wrote {args.views} views of {args.size[0]}x{args.size[1]} to {args.out}")
    return 0


def _load_scene(path):
    if not Path(path).is_dir():
        raise FileNotFoundError(f"scene directory not found: {path}")
    return scene.load_scene(path)


def _cmd_train(args):
    sc = _load_scene(args.scene)
    overrides = {"image_size": list(sc.images[0].shape)}
    if args.preset:
        overrides["attention_layers"] = sorted(_PRESETS[args.preset])
    if args.config:
        if not Path(args.config).is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        network_dict, train_cfg = configmod.load_train_file(args.config, overrides)
    else:
        network_dict, train_cfg = overrides, training.TrainConfig()
    if args.steps is not None:
        train_cfg = configmod.train_config_from_dict(
            {**train_cfg.__dict__, "steps": args.steps})
    net_cfg = configmod.network_config_from_dict(network_dict)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = training.samples_from_scene(sc, range(len(sc.images)))
    result = training.train(samples, net_cfg, train_cfg,
                            checkpoint_path=out / "checkpoint.bin")
    training.save_history_csv(out / "history.csv", result.history)
    with open(out / "network.yaml", "w") as fh:
        yaml.safe_dump(configmod.network_config_to_dict(net_cfg), fh)
    for i, (depth, conf) in enumerate(
            training.predict_scene_depths(sc, net_cfg, result.params)):
        depthio.save_depth(out / f"pred_{i:03d}.bin", depth, conf)
        depthio.write_depth_preview(out / f"pred_{i:03d}.png", depth)
    print(f"trained {train_cfg.steps} steps; final loss "
          f"{result.history[-1]['loss']:.6g}; wrote {out}")
    return 0


def _load_predictions(pred_dir, count):
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    preds = []
    for i in range(count):
        path = pred_dir / f"pred_{i:03d}.bin"
        if not path.is_file():
            raise FileNotFoundError(f"missing prediction map: {path}")
        preds.append(depthio.load_depth(path))
    return preds


def _cmd_eval(args):
    sc = _load_scene(args.scene)
    preds = _load_predictions(args.pred, len(sc.images))
    reports = {}
    for i, ((depth, _), gt) in enumerate(zip(preds, sc.depths)):
        if args.scale_aligned:
            reports[f"view_{i:03d}"], _ = metrics.evaluate_scale_aligned(depth, gt)
        else:
            reports[f"view_{i:03d}"] = metrics.evaluate(depth, gt)
    pooled_pred = np.concatenate([d.ravel() for d, _ in preds])
    pooled_gt = np.concatenate([g.ravel() for g in sc.depths])
    if args.scale_aligned:
        reports["all"], _ = metrics.evaluate_scale_aligned(pooled_pred, pooled_gt)
    else:
        reports["all"] = metrics.evaluate(pooled_pred, pooled_gt)
    print(metrics.format_table(reports))
    if args.csv:
        metrics.write_csv(args.csv, reports)
    return 0


def _cmd_perturb(args):
    sc = _load_scene(args.scene)
    records = perturb.perturb_scene(sc, args.noise, args.seed,
                                    point_count=args.points,
                                    accept_px=args.accept_px)
    perturb.save_perturbations(args.out, records)
    for rec in records:
        state = "accepted" if rec.accepted else "rejected"
        print(f"view {rec.ref_view}: {state} rot_delta={rec.rotation_delta:.6g} "
              f"trans_delta={rec.translation_delta:.6g}")
    return 0


def _cmd_fuse(args):
    sc = _load_scene(args.scene)
    preds = _load_predictions(args.pred, len(sc.images))
    depths = [d for d, _ in preds]
    masks = None
    if args.max_sigma is not None:
        masks = []
        for depth, conf in preds:
            if conf is None:
                raise ValueError("--max-sigma needs confidence channels in the "
                                 "prediction maps")
            masks.append(fusion.filter_by_confidence(conf, args.max_sigma))
    cloud = fusion.fuse_depth_maps(depths, sc.intrinsics, sc.poses,
                                   min_views=args.min_views,
                                   consistency_px=args.consistency_px,
                                   rel_depth_tol=args.rel_depth_tol,
                                   masks=masks)
    fusion.write_ply(args.out, cloud)
    print(f"fused {len(cloud.points)} points (min_views={args.min_views}) "
          f"into {args.out}")
    return 0


def _cmd_attn_dump(args):
    sc = _load_scene(args.scene)
    train_dir = Path(args.train_dir)
    net_yaml = train_dir / "network.yaml"
    ckpt = train_dir / "checkpoint.bin"
    if not net_yaml.is_file() or not ckpt.is_file():
        raise FileNotFoundError(f"train dir lacks network.yaml/checkpoint.bin: "
                                f"{train_dir}")
    with open(net_yaml) as fh:
        net_cfg = configmod.network_config_from_dict(yaml.safe_load(fh))
    if not net_cfg.attention_layers:
        raise ValueError("the trained network has no attention sites to dump")
    site = args.site if args.site is not None else min(net_cfg.attention_layers)
    if site not in net_cfg.attention_layers:
        raise ValueError(f"site {site} not in trained sites "
                         f"{sorted(net_cfg.attention_layers)}")
    params = init_parameters(net_cfg, np.random.default_rng(0))
    training.load_parameters_into(params, ckpt)
    sample = training.samples_from_scene(sc, [args.source])[0]
    pred = depth_net_forward(sample.image, sample.ref_images, sample.intrinsics,
                             sample.poses, net_cfg, params,
                             record_attention=True)
    weights, _ = pred.attention_weights[site]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pixel", "view", "hypothesis", "weight"])
        p_total, n, k = weights.shape
        for p in range(p_total):
            for v in range(n):
                for j in range(k):
                    writer.writerow([p, v, j, f"{weights[p, v, j]:.17g}"])
    print(f"wrote {p_total * n * k} weights for site {site} to {args.out}")
    return 0


def _cmd_depth_preview(args):
    if not Path(args.depth).is_file():
        raise FileNotFoundError(f"depth map not found: {args.depth}")
    depth, _ = depthio.load_depth(args.depth)
    depthio.write_depth_preview(args.out, depth)
    print(f"wrote preview of {args.depth} to {args.out}")
    return 0


_COMMANDS = {"gen-scene": _cmd_gen_scene, "train": _cmd_train,
             "eval": _cmd_eval, "perturb": _cmd_perturb, "fuse": _cmd_fuse,
             "attn-dump": _cmd_attn_dump, "depth-preview": _cmd_depth_preview}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"epidepth: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ComputationError, GenerationError, SolverError) as exc:
        print(f"epidepth: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
