"""Frame-by-frame SLAM orchestration.

Each frame is tracked (photometric pose prior, then scan-to-map ICP), rendered
at the tracked pose to build its refined dynamic mask and, on keyframes, used
to grow the registration map and the active Gaussian submap before a round of
mapping optimization.
"""

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Sequence

import numpy as np
import torch

import config as settings
from config import PipelineConfig
from dataset_io import Dataset, save_gaussians, write_mask, write_trajectory
from dynamic_masking import compute_masks, dilate_mask, lift_mask_to_points
from errors import DimensionMismatch, Diverged, EmptyInput, EmptyPixelSet
from frames import FrameBundle
from gaussian_map import GaussianSet, Submap, SubmapWorld, assign_submap, init_from_lidar, prune
from geometry import CameraIntrinsics, SE3Pose, pixel_index, project_points, se3_apply, se3_compose, se3_exp, se3_inverse
from losses import LossReport, evaluate_losses
from metrics import ate_rmse, psnr, ssim
from rasterizer import render, render_backward, render_numpy
from registration import AdaptiveThreshold, VoxelHashMap, predict_initial, register_scan, update_map, voxel_downsample
from utils import log_info, log_warning, seed_everything, write_json, write_jsonl

# tracking only trusts pixels the map already covers this well
TRACKING_ALPHA_MIN = 0.5
COARSE_VOXEL_FACTOR = 1.5
FINE_VOXEL_FACTOR = 0.5
# pixels the previous dynamic mask is grown by before it filters the ICP query
QUERY_MASK_DILATION = 2

OPTIMIZER_LR = {
    "positions": "position_lr",
    "log_scales": "log_scale_lr",
    "rotations": "rotation_lr",
    "opacity_logits": "opacity_lr",
    "colors": "color_lr",
    "semantic_logits": "semantic_lr",
    "features": "feature_lr",
}


@dataclass
class Keyframe:
    frame: FrameBundle
    pose: SE3Pose
    refined_mask: np.ndarray


@dataclass
class SlamState:
    K: CameraIntrinsics
    extrinsic: SE3Pose  # LiDAR -> camera
    config: PipelineConfig
    world: SubmapWorld
    voxel_map: VoxelHashMap
    threshold: AdaptiveThreshold
    trajectory: List[SE3Pose] = field(default_factory=list)
    timestamps: List[float] = field(default_factory=list)
    frame_indices: List[int] = field(default_factory=list)
    keyframes: Deque[Keyframe] = field(default_factory=deque)
    refined_masks: List[np.ndarray] = field(default_factory=list)
    loss_log: List[Dict[str, Any]] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)
    last_report: Optional[LossReport] = None

    @classmethod
    def create(cls, K: CameraIntrinsics, extrinsic: SE3Pose, config: PipelineConfig) -> "SlamState":
        reg = config.registration
        return cls(
            K=K,
            extrinsic=extrinsic,
            config=config,
            world=SubmapWorld(config.num_classes, config.feature_dim),
            voxel_map=VoxelHashMap(reg.voxel_size, reg.max_points_per_voxel, reg.map_range),
            threshold=AdaptiveThreshold(reg.initial_threshold, reg.min_motion, reg.max_range),
            keyframes=deque(maxlen=config.mapping_window),
        )

    @property
    def previous_mask(self) -> Optional[np.ndarray]:
        return self.refined_masks[-1] if self.refined_masks else None

    def log_loss(self, frame: int, iteration: int, phase: str, report: LossReport):
        self.loss_log.append(
            {
                "frame": frame,
                "iteration": iteration,
                "phase": phase,
                "l_c": report.l_c,
                "l_depth": report.l_depth,
                "l_s": report.l_s,
                "l_dino": report.l_dino,
                "total": report.total,
            }
        )


def _pose_optimizer(config: PipelineConfig):
    trans = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    rot = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam(
        [
            {"params": [trans], "lr": config.optimizer.pose_translation_lr},
            {"params": [rot], "lr": config.optimizer.pose_rotation_lr},
        ]
    )
    return trans, rot, opt


def optimize_pose(frame: FrameBundle, state: SlamState, init: SE3Pose) -> SE3Pose:
    """Loss-based pose prior: descend the total loss in the tangent space at the current estimate"""
    config = state.config
    gaussians = state.world.all_gaussians()
    if len(gaussians) == 0:
        return init
    weights = config.effective_loss_weights
    trans, rot, opt = _pose_optimizer(config)
    pose = init
    exclude = None
    for it in range(config.tracking_iterations):
        out = render(gaussians, pose, state.K, requires_grad=True)
        if exclude is None:
            exclude = out.numpy("alpha") < TRACKING_ALPHA_MIN
            if state.previous_mask is not None:
                exclude |= state.previous_mask
        try:
            report, grad_maps = evaluate_losses(out, frame, exclude, weights)
        except EmptyPixelSet as e:
            log_warning("track", f"frame {frame.index}: {e}; keeping the predicted pose")
            return pose
        state.log_loss(frame.index, it, "track", report)
        g = render_backward(out.ctx, grad_maps, detach_semantic_weights=True).pose
        opt.zero_grad()
        trans.grad = torch.from_numpy(g[:3].copy())
        rot.grad = torch.from_numpy(g[3:].copy())
        opt.step()
        with torch.no_grad():
            step = torch.cat([trans, rot]).numpy().copy()
            trans.zero_()
            rot.zero_()
        # retraction at the current estimate
        pose = se3_compose(pose, se3_exp(step))
    return pose


def track(frame: FrameBundle, state: SlamState) -> SE3Pose:
    """Constant-velocity prediction, loss-based prior, then ICP refinement.

    The ICP result replaces the prior; when ICP diverges (or has nothing to
    match) the prior is kept and a warning is logged.
    """
    if not state.trajectory:
        return SE3Pose.identity()
    prev = state.trajectory[-1]
    prev_prev = state.trajectory[-2] if len(state.trajectory) > 1 else None
    predicted = predict_initial(prev, prev_prev)
    prior = optimize_pose(frame, state, predicted)

    reg = state.config.registration
    scan_cam = frame.scan.transformed(state.extrinsic)
    if state.previous_mask is not None and state.previous_mask.any():
        # points on last frame's movers stay out of the query as well as the map
        grown = dilate_mask(state.previous_mask, QUERY_MASK_DILATION)
        scan_cam = scan_cam.select(lift_mask_to_points(grown, scan_cam, SE3Pose.identity(), state.K))
    coarse = voxel_downsample(scan_cam, COARSE_VOXEL_FACTOR * reg.voxel_size)
    try:
        result = register_scan(state.voxel_map, coarse, prior, state.threshold, reg.max_iterations, reg.convergence)
        pose = result.pose
        log_info("track", f"frame {frame.index}: ICP {result.iterations} iterations, {result.correspondences} matches")
    except Diverged as e:
        log_warning("track", f"frame {frame.index}: ICP diverged ({e}), keeping loss prior")
        pose = prior
    except EmptyInput as e:
        log_warning("track", f"frame {frame.index}: {e}, keeping loss prior")
        pose = prior
    state.threshold.update_model_deviation(se3_compose(se3_inverse(predicted), pose))
    return pose


def _write_back(current: GaussianSet, params: Dict[str, torch.Tensor]):
    for name, t in params.items():
        setattr(current, name, t.detach().numpy().copy())
    current.clamp_invariants()
    with torch.no_grad():
        for name, t in params.items():
            t.copy_(torch.from_numpy(getattr(current, name)))


def _gaussian_optimizer(current: GaussianSet, config: PipelineConfig):
    params = {name: torch.tensor(getattr(current, name), dtype=torch.float64, requires_grad=True) for name in GaussianSet.ATTRIBUTES}
    groups = [{"params": [params[name]], "lr": getattr(config.optimizer, OPTIMIZER_LR[name])} for name in GaussianSet.ATTRIBUTES]
    return params, torch.optim.Adam(groups)


def map_step(
    keyframes: Sequence[Keyframe],
    submap: Submap,
    config: PipelineConfig,
    K: CameraIntrinsics,
    frozen: Optional[GaussianSet] = None,
    iterations: Optional[int] = None,
    state: Optional[SlamState] = None,
) -> Optional[LossReport]:
    """Optimize the active submap against the most recent keyframes.

    Frozen Gaussians are rendered in front of the active ones' rows but never
    updated. Returns the last evaluated LossReport, or None when nothing ran.
    """
    if not keyframes:
        raise ValueError("map_step needs at least one keyframe")
    iterations = config.mapping_iterations if iterations is None else iterations
    if iterations <= 0 or len(submap) == 0:
        return None
    window = list(keyframes)[-config.mapping_window :]
    weights = config.effective_loss_weights
    if frozen is None:
        frozen = GaussianSet.empty(submap.gaussians.num_classes, submap.gaussians.feature_dim)
    n_frozen = len(frozen)

    current = submap.gaussians.copy()
    params, opt = _gaussian_optimizer(current, config)
    report = None
    for it in range(iterations):
        kf = window[it % len(window)]
        scene = GaussianSet.concat([frozen, current], current.num_classes, current.feature_dim)
        out = render(scene, kf.pose, K, requires_grad=True)
        try:
            step_report, grad_maps = evaluate_losses(out, kf.frame, kf.refined_mask, weights)
        except EmptyPixelSet as e:
            log_warning("map", f"keyframe {kf.frame.index}: {e}; skipping iteration {it}")
            continue
        report = step_report
        if state is not None:
            state.log_loss(kf.frame.index, it, "map", report)
        grads = render_backward(out.ctx, grad_maps, detach_semantic_weights=True)
        opt.zero_grad()
        for name, t in params.items():
            t.grad = torch.from_numpy(getattr(grads, name)[n_frozen:].copy())
        opt.step()
        _write_back(current, params)

        if (it + 1) % config.prune_every == 0:
            holder = Submap(submap.key, submap.origin, submap.extent, current)
            if prune(holder, config.opacity_min):
                current = holder.gaussians
                params, opt = _gaussian_optimizer(current, config)
    submap.gaussians = current
    return report


def _one_per_pixel(gaussians: GaussianSet, pose: SE3Pose, K: CameraIntrinsics) -> GaussianSet:
    """Keep the nearest new Gaussian on each pixel"""
    if len(gaussians) == 0:
        return gaussians
    uv, z, _ = project_points(K, se3_apply(se3_inverse(pose), gaussians.positions))
    rows, cols, _ = pixel_index(K, uv)
    flat = rows * K.width + cols
    order = np.lexsort((z, flat))
    _, first = np.unique(flat[order], return_index=True)
    return gaussians.select(np.sort(order[first]))


def _is_keyframe(frame: FrameBundle, pose: SE3Pose, state: SlamState) -> bool:
    if not state.keyframes:
        return True
    last = state.keyframes[-1]
    if frame.index - last.frame.index >= state.config.keyframe_interval:
        return True
    moved = float(np.linalg.norm(pose.translation - last.pose.translation))
    return moved > state.config.keyframe_translation


def process_frame(frame: FrameBundle, state: SlamState) -> SlamState:
    """Run one frame through tracking, masking and (on keyframes) mapping"""
    config = state.config
    try:
        frame.validate(state.K, config.feature_dim)
    except DimensionMismatch as e:
        log_warning("frame", f"skipping frame {frame.index}: {e}")
        state.skipped.append(frame.index)
        return state

    pose = track(frame, state)
    scene = state.world.all_gaussians()
    rendered = render(scene, pose, state.K, requires_grad=False) if len(scene) else None
    masks = compute_masks(rendered, frame, config.masking)
    refined = masks.refined
    if masks.sigma is not None:
        log_info("mask", f"frame {frame.index}: sigma {masks.sigma:.4g}, {int(refined.sum())} dynamic pixels")

    if _is_keyframe(frame, pose, state):
        identity = SE3Pose.identity()
        scan_cam = frame.scan.transformed(state.extrinsic)

        fine = voxel_downsample(scan_cam, FINE_VOXEL_FACTOR * config.registration.voxel_size)
        static = lift_mask_to_points(refined, fine, identity, state.K)
        tags = [(frame.index, i) for i in range(len(fine))] if settings.DEBUG else None
        update_map(state.voxel_map, fine, pose, static, tags)

        submap = assign_submap(state.world, pose, config.submap_extent)
        covered = rendered.numpy("alpha") >= config.new_gaussian_alpha_max if rendered is not None else np.zeros(state.K.shape, dtype=bool)
        seeds = init_from_lidar(scan_cam, pose, state.K, frame, refined | covered, config.num_classes, config.init_scale_factor)
        added = submap.insert(_one_per_pixel(seeds, pose, state.K))

        state.keyframes.append(Keyframe(frame, pose, refined))
        report = map_step(state.keyframes, submap, config, state.K, frozen=state.world.frozen_gaussians(), state=state)
        if report is not None:
            state.last_report = report
        log_info(
            "map",
            f"keyframe {frame.index}: +{added} Gaussians, {state.world.gaussian_count} total"
            + (f", loss {report.total:.5f}" if report is not None else ""),
        )

    state.trajectory.append(pose)
    state.timestamps.append(frame.timestamp)
    state.frame_indices.append(frame.index)
    state.refined_masks.append(refined)
    return state


@dataclass
class RunSummary:
    frames: int
    skipped: List[int]
    gaussians: int
    submaps: int
    final_loss: Optional[float]
    ate_rmse: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None


def run_frames(dataset: Dataset, config: PipelineConfig) -> SlamState:
    seed_everything(config.seed)
    state = SlamState.create(dataset.K, dataset.extrinsic, config)
    for frame in dataset:
        process_frame(frame, state)
        log_info("run", f"frame {frame.index} done, {state.world.gaussian_count} Gaussians")
    return state


def evaluate_views(state: SlamState, dataset: Dataset) -> Dict[str, float]:
    """Mean PSNR / SSIM of the final map rendered at every tracked pose.

    PSNR skips ground-truth moving pixels where the dataset provides them.
    """
    gaussians = state.world.all_gaussians()
    scores_p, scores_s = [], []
    for index, pose in zip(state.frame_indices, state.trajectory):
        color = render_numpy(gaussians, pose, state.K)["color"]
        frame = dataset[index]
        static = None
        if frame.motion_mask is not None and not frame.motion_mask.all():
            static = ~frame.motion_mask
        scores_p.append(psnr(color, frame.image, static))
        scores_s.append(ssim(color, frame.image))
    finite = [p for p in scores_p if np.isfinite(p)]
    return {
        "psnr": float(np.mean(finite)) if finite else float("inf"),
        "ssim": float(np.mean(scores_s)) if scores_s else float("nan"),
    }


def summarize(state: SlamState, dataset: Dataset, with_views: bool = True) -> RunSummary:
    summary = RunSummary(
        frames=len(state.trajectory),
        skipped=list(state.skipped),
        gaussians=state.world.gaussian_count,
        submaps=len(state.world.submaps),
        final_loss=None if state.last_report is None else state.last_report.total,
    )
    if dataset.gt_poses is not None and len(state.trajectory) >= 2:
        reference = [dataset.gt_poses[i] for i in state.frame_indices]
        summary.ate_rmse = ate_rmse(state.trajectory, reference).rmse
    if with_views and state.trajectory:
        views = evaluate_views(state, dataset)
        summary.psnr, summary.ssim = views["psnr"], views["ssim"]
    return summary


def write_outputs(state: SlamState, summary: RunSummary, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(state.trajectory, state.timestamps, out / "trajectory.txt")
    for index, mask in zip(state.frame_indices, state.refined_masks):
        write_mask(out / "masks" / f"{index:06d}.png", mask)
    write_jsonl(out / "loss_log.jsonl", state.loss_log)
    save_gaussians(state.world.all_gaussians(), out / "map.ply")
    write_json(out / "summary.json", summary.__dict__)


def run_sequence(dataset: Dataset, config: PipelineConfig, out_dir=None) -> RunSummary:
    """Process every frame of a dataset and write the run outputs to out_dir"""
    state = run_frames(dataset, config)
    summary = summarize(state, dataset)
    if out_dir is not None:
        write_outputs(state, summary, out_dir)
    log_info("run", f"{summary.frames} frames, {summary.gaussians} Gaussians, ATE {summary.ate_rmse}")
    return summary


ABLATION_ROWS = (
    ("full", True, True),
    ("masking-only", True, False),
    ("representation-only", False, True),
    ("baseline", False, False),
)


@dataclass
class AblationRow:
    name: str
    dynamic_masking: bool
    hierarchical_losses: bool
    summary: RunSummary


def ablation_config(config: PipelineConfig, dynamic_masking: bool, hierarchical_losses: bool) -> PipelineConfig:
    cfg = config.model_copy(deep=True)
    cfg.masking.enabled = dynamic_masking
    cfg.hierarchical_losses = hierarchical_losses
    return cfg


def run_ablation(dataset: Dataset, config: PipelineConfig, out_dir=None) -> List[AblationRow]:
    """The four masking x hierarchical-loss rows, each a full seeded run"""
    rows = []
    for name, masking, hierarchical in ABLATION_ROWS:
        log_info("ablation", f"running {name}")
        sub_out = None if out_dir is None else Path(out_dir) / name
        summary = run_sequence(dataset, ablation_config(config, masking, hierarchical), sub_out)
        rows.append(AblationRow(name, masking, hierarchical, summary))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'row':<22}{'masking':>9}{'hier':>6}{'ATE-RMSE':>11}{'PSNR':>9}{'SSIM':>8}"]
    for r in rows:
        s = r.summary
        ate = "n/a" if s.ate_rmse is None else f"{s.ate_rmse:.4f}"
        p = "n/a" if s.psnr is None else f"{s.psnr:.2f}"
        q = "n/a" if s.ssim is None else f"{s.ssim:.4f}"
        lines.append(f"{r.name:<22}{'on' if r.dynamic_masking else 'off':>9}{'on' if r.hierarchical_losses else 'off':>6}{ate:>11}{p:>9}{q:>8}")
    return "\n".join(lines)
