"""Synthetic dataset generator.

Ray-casts a textured corridor (floor, ceiling beams, walls, pillars, crates)
from a camera moving down its length, optionally with slow-moving blocks
ahead of it. Emits every asset the dataset reader expects plus ground-truth
poses and motion masks.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from dataset_io import (
    write_calibration,
    write_depth,
    write_feature_map,
    write_image,
    write_labels,
    write_mask,
    write_scan,
    write_trajectory,
)
from dynamic_masking import dilate_mask
from errors import IoFailure
from geometry import CameraIntrinsics, PointCloud, SE3Pose, se3_compose
from utils import log_info

WIDTH, HEIGHT = 64, 48
FOCAL = 50.0
NUM_CLASSES = 4
FEATURE_DIM = 8
FLOOR, WALL, PILLAR, MOVER = range(NUM_CLASSES)
# the segmenter's masks bleed this many pixels past the object outline
SEGMENT_HALO = 1

STEP = 0.5  # meters per frame along z
# forward-looking non-repetitive LiDAR, just wider than the camera frustum
LIDAR_H_FOV = 34.0
LIDAR_V_FOV = 30.0
LIDAR_CELL = 0.8  # degrees; one jittered ray per cell
LIDAR_MAX_RANGE = 30.0
LIDAR_NOISE = 0.003
FRAME_PERIOD = 0.1

BASE_COLORS = {
    FLOOR: np.array([0.55, 0.5, 0.4]),
    WALL: np.array([0.35, 0.55, 0.7]),
    PILLAR: np.array([0.75, 0.7, 0.3]),
    MOVER: np.array([0.85, 0.25, 0.2]),
}

BEAMS = (1.6, 3.3, 5.5, 7.1, 9.6, 11.2, 13.5, 15.2, 17.4, 19.1, 21.6, 23.3)
CRATES = ((-0.9, 2.5), (-0.9, 6.0), (0.8, 10.5), (-0.7, 14.0), (0.6, 18.5), (0.9, 22.0))
# (x, z at frame 0, meters per frame along z); none is overtaken within 30 frames
MOVERS = ((-0.5, 9.0, 0.25), (0.55, 17.0, -0.03), (-0.3, 22.0, 0.05))
MOVER_HALF = np.array([0.4, 0.6, 0.5])

FIXTURE_CONFIG = """\
# tuned for the synthetic corridor
num_classes = 4
feature_dim = 8
tracking_iterations = 15
mapping_iterations = 40
keyframe_interval = 5
init_scale_factor = 1.5
registration.voxel_size = 0.5
registration.initial_threshold = 3.0
registration.max_range = 30
registration.map_range = 30
"""


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    label: int


def fixture_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(FOCAL, FOCAL, (WIDTH - 1) / 2.0, (HEIGHT - 1) / 2.0, WIDTH, HEIGHT)


def lidar_extrinsic() -> SE3Pose:
    """LiDAR (x forward, y left, z up) to camera (x right, y down, z forward), mounted 8 cm above"""
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return SE3Pose.from_rotation_translation(R, np.array([0.0, -0.08, 0.0]))


def camera_pose(i: int) -> SE3Pose:
    """Ground-truth camera-to-world pose; frame 0 is the world origin"""
    t = np.array([0.15 * np.sin(0.25 * i), 0.05 * np.sin(0.3 * i), STEP * i])
    return SE3Pose.from_rotvec([0.0, 0.04 * np.sin(0.2 * i), 0.0], t)


ROOM = Box(np.array([-1.5, -1.5, -2.0]), np.array([1.5, 1.0, 25.0]), WALL)


def static_boxes() -> List[Box]:
    boxes = []
    for k, z in enumerate((4.0, 8.0, 12.0, 16.0, 20.0)):
        x = 1.1 if k % 2 == 0 else -1.1
        boxes.append(Box(np.array([x - 0.2, -1.5, z - 0.2]), np.array([x + 0.2, 1.0, z + 0.2]), PILLAR))
    for x, z in CRATES:
        boxes.append(Box(np.array([x - 0.3, 0.6, z - 0.3]), np.array([x + 0.3, 1.0, z + 0.3]), WALL))
    # ceiling beams break the corridor's symmetry along its axis
    for z in BEAMS:
        boxes.append(Box(np.array([-1.5, -1.5, z - 0.15]), np.array([1.5, -1.25, z + 0.15]), WALL))
    return boxes


def moving_boxes(i: int) -> List[Box]:
    boxes = []
    for x, z0, speed in MOVERS:
        c = np.array([x, -0.05, z0 + speed * i])
        boxes.append(Box(c - MOVER_HALF, c + MOVER_HALF, MOVER))
    return boxes


def _slabs(origin: np.ndarray, dirs: np.ndarray, box: Box):
    safe = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
    t0 = (box.lo - origin) / safe
    t1 = (box.hi - origin) / safe
    near, far = np.minimum(t0, t1), np.maximum(t0, t1)
    return near.max(axis=1), far.min(axis=1), far.argmin(axis=1)


def cast(origin: np.ndarray, dirs: np.ndarray, boxes: List[Box]) -> Tuple[np.ndarray, np.ndarray]:
    """First hit distance (in units of dirs) and class label for every ray"""
    _, t, axis = _slabs(origin, dirs, ROOM)
    labels = np.where(axis == 1, FLOOR, WALL)
    for box in boxes:
        t_in, t_out, _ = _slabs(origin, dirs, box)
        hit = (t_in > 1e-6) & (t_in <= t_out) & (t_in < t)
        t = np.where(hit, t_in, t)
        labels = np.where(hit, box.label, labels)
    return t, labels


def texture(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    pattern = 0.5 + 0.5 * np.sin(2.1 * x + 1.3 * z) * np.cos(1.7 * y + 0.9 * z)
    base = np.stack([BASE_COLORS[int(l)] for l in range(NUM_CLASSES)])[labels]
    return np.clip(base * (0.55 + 0.45 * pattern[:, None]), 0.0, 1.0)


def features(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    basis = np.random.default_rng(1234).normal(size=(NUM_CLASSES, FEATURE_DIM))
    freq = np.linspace(0.5, 1.5, FEATURE_DIM)
    local = 0.2 * np.sin(freq[None, :] * (points[:, 0:1] + 0.5 * points[:, 2:3]))
    return basis[labels] + local


def render_frame(pose: SE3Pose, boxes: List[Box], K: CameraIntrinsics):
    """Image, depth, labels and world hit points for one camera pose"""
    rows, cols = np.divmod(np.arange(K.height * K.width), K.width)
    dirs_cam = np.stack([(cols - K.cx) / K.fx, (rows - K.cy) / K.fy, np.ones(rows.shape[0])], axis=1)
    dirs = dirs_cam @ pose.rotation_matrix().T
    t, labels = cast(pose.translation, dirs, boxes)
    points = pose.translation + t[:, None] * dirs
    shape = (K.height, K.width)
    image = texture(points, labels).reshape(shape + (3,))
    return image, t.reshape(shape), labels.reshape(shape), points


def scan_directions(rng: np.random.Generator) -> np.ndarray:
    """Unit ray directions in the LiDAR frame, one per angular cell, jittered inside it.

    Consecutive scans therefore never hit the same surface points, as with a
    non-repetitive scan pattern.
    """
    elev = np.arange(-LIDAR_V_FOV, LIDAR_V_FOV, LIDAR_CELL) + 0.5 * LIDAR_CELL
    azim = np.arange(-LIDAR_H_FOV, LIDAR_H_FOV, LIDAR_CELL) + 0.5 * LIDAR_CELL
    e, a = np.meshgrid(elev, azim, indexing="ij")
    e = np.deg2rad(e + rng.uniform(-0.5, 0.5, e.shape) * LIDAR_CELL).ravel()
    a = np.deg2rad(a + rng.uniform(-0.5, 0.5, a.shape) * LIDAR_CELL).ravel()
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=1)


def lidar_scan(pose: SE3Pose, boxes: List[Box], extrinsic: SE3Pose, rng: np.random.Generator) -> PointCloud:
    """Scan covering the camera frustum, returned in the LiDAR frame"""
    dirs_l = scan_directions(rng)
    T_wl = se3_compose(pose, extrinsic)
    dirs_w = dirs_l @ T_wl.rotation_matrix().T
    r, _ = cast(T_wl.translation, dirs_w, boxes)
    keep = np.isfinite(r) & (r > 0.1) & (r < LIDAR_MAX_RANGE)
    r = r + rng.normal(scale=LIDAR_NOISE, size=r.shape)
    points_l = dirs_l[keep] * r[keep, None]
    return PointCloud(points_l, np.full(points_l.shape[0], 0.5))


def segmenter_mask(labels: np.ndarray) -> np.ndarray:
    """Explicit dynamic mask: every movable-class pixel plus a halo around it"""
    return dilate_mask(labels == MOVER, SEGMENT_HALO)


def make_fixture(out, frames: int = 30, dynamic: bool = False, seed: int = 0) -> Path:
    """Write a complete synthetic dataset to out and return its path"""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create fixture directory: {e}", root) from None
    rng = np.random.default_rng(seed)
    K = fixture_intrinsics()
    extrinsic = lidar_extrinsic()
    write_calibration(root / "calib.txt", K, extrinsic)

    poses, stamps = [], []
    for i in range(frames):
        pose = camera_pose(i)
        boxes = static_boxes() + (moving_boxes(i) if dynamic else [])
        image, depth, labels, points = render_frame(pose, boxes, K)
        name = f"{i:06d}"
        write_image(root / "image_2" / f"{name}.png", image)
        write_depth(root / "depth" / f"{name}.bin", depth)
        write_labels(root / "semantic" / f"{name}.png", labels)
        write_feature_map(root / "features" / f"{name}.lvdf", features(points, labels.ravel()).reshape(K.height, K.width, FEATURE_DIM))
        write_mask(root / "masks" / f"{name}.png", segmenter_mask(labels))
        if dynamic:
            write_mask(root / "motion_masks" / f"{name}.png", labels == MOVER)
        write_scan(root / "velodyne" / f"{name}.bin", lidar_scan(pose, boxes, extrinsic, rng))
        poses.append(pose)
        stamps.append(round(i * FRAME_PERIOD, 6))

    write_trajectory(poses, stamps, root / "groundtruth.txt")
    try:
        (root / "times.txt").write_text("".join(f"{t:.6f}\n" for t in stamps))
        (root / "config.txt").write_text(FIXTURE_CONFIG)
    except OSError as e:
        raise IoFailure(f"cannot write fixture metadata: {e}", root) from None
    log_info("fixture", f"wrote {frames} {'dynamic' if dynamic else 'static'} frames to {root}")
    return root
