# main.py
import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import load_config
from dataset_io import (
    load_calibration,
    load_gaussians,
    open_dataset,
    parse_pose_string,
    read_image,
    read_trajectory,
    write_depth,
    write_image,
    write_labels,
    write_render_channels,
)
from errors import LvdgsError
from fixture import make_fixture
from metrics import ate_rmse, psnr, ssim
from pipeline import ablation_config, format_ablation, run_ablation, run_sequence
from rasterizer import render_numpy
from utils import append_jsonl, utcnow_iso


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    config = ablation_config(config, not args.no_dynamic_masking, not args.no_hier_losses)
    dataset = open_dataset(args.dataset, config).limit(args.frames)
    summary = run_sequence(dataset, config, args.out)
    print(f"frames: {summary.frames}  gaussians: {summary.gaussians}  skipped: {len(summary.skipped)}")
    if summary.ate_rmse is not None:
        print(f"ATE-RMSE (m): {summary.ate_rmse:.3f}")
    return 0


def _image_scores(renders: Path, gt_images: Path):
    pairs = [(p, gt_images / p.name) for p in sorted(renders.glob("*.png")) if (gt_images / p.name).exists()]
    if not pairs:
        return None, None, 0
    p_scores, s_scores = [], []
    for rendered, truth in pairs:
        a, b = read_image(rendered), read_image(truth)
        p_scores.append(psnr(a, b))
        s_scores.append(ssim(a, b))
    return float(np.mean(p_scores)), float(np.mean(s_scores)), len(pairs)


def cmd_eval(args) -> int:
    estimated, _ = read_trajectory(args.traj)
    reference, _ = read_trajectory(args.gt)
    result = ate_rmse(estimated, reference, with_scale=args.with_scale, align=not args.no_align)
    print(f"ATE-RMSE (m): {result.rmse:.3f}")
    record = {"traj": args.traj, "gt": args.gt, "frames": len(estimated), "ate_rmse": result.rmse, "time": utcnow_iso()}
    if args.renders and args.gt_images:
        mean_psnr, mean_ssim, count = _image_scores(Path(args.renders), Path(args.gt_images))
        if count:
            print(f"PSNR (dB): {mean_psnr:.3f}")
            print(f"SSIM: {mean_ssim:.4f}")
            record.update(psnr=mean_psnr, ssim=mean_ssim, images=count)
        else:
            print("[eval] no matching images between render and ground-truth directories", file=sys.stderr)
    if args.record:
        append_jsonl(Path(args.record), record)
    return 0


def cmd_render(args) -> int:
    try:
        pose = parse_pose_string(args.pose)
    except ValueError as e:
        print(f"error: malformed pose: {e}", file=sys.stderr)
        return 1
    K, _ = load_calibration(args.intrinsics)
    gaussians = load_gaussians(args.map)
    channels = render_numpy(gaussians, pose, K)
    write_image(args.out, channels["color"])
    if args.depth_out:
        write_depth(args.depth_out, channels["depth"])
    if args.semantic_out:
        write_labels(args.semantic_out, np.argmax(channels["semantic_prob"], axis=-1))
    print(f"[render] {len(gaussians)} Gaussians -> {args.out}", file=sys.stderr)
    return 0


def cmd_export(args) -> int:
    K, _ = load_calibration(args.intrinsics)
    gaussians = load_gaussians(args.map)
    poses, _ = read_trajectory(args.traj)
    for i, pose in enumerate(poses):
        write_render_channels(args.out, f"{i:06d}", render_numpy(gaussians, pose, K))
    print(f"[export] {len(poses)} views -> {args.out}", file=sys.stderr)
    return 0


def cmd_make_fixture(args) -> int:
    root = make_fixture(args.out, frames=args.frames, dynamic=args.dynamic, seed=args.seed)
    print(f"[make-fixture] dataset written to {root}", file=sys.stderr)
    return 0


def cmd_ablation(args) -> int:
    config_path = args.config or str(Path(args.dataset) / "config.txt")
    config = load_config(config_path)
    dataset = open_dataset(args.dataset, config)
    rows = run_ablation(dataset, config, args.out)
    print(format_ablation(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lvdgs", description="LiDAR-visual Gaussian splatting SLAM")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the SLAM pipeline over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, help="process only the first N frames")
    p.add_argument("--no-dynamic-masking", action="store_true")
    p.add_argument("--no-hier-losses", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="ATE-RMSE and optional PSNR/SSIM")
    p.add_argument("--traj", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--renders")
    p.add_argument("--gt-images")
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--with-scale", action="store_true")
    p.add_argument("--record", help="append a JSON line with the metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a saved map at one pose")
    p.add_argument("--map", required=True)
    p.add_argument("--pose", required=True, help='"tx ty tz qx qy qz qw"')
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-out")
    p.add_argument("--semantic-out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("make-fixture", help="write the synthetic corridor dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--dynamic", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("export", help="render a saved map at every trajectory pose")
    p.add_argument("--map", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("ablation", help="masking x hierarchical-loss ablation table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (LvdgsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
