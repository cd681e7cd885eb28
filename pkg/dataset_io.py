"""Dataset ingestion (KITTI-style layout plus precomputed assets) and file exporters."""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from config import FEATURE_MAGIC, SIDECAR_MAGIC, PipelineConfig
from errors import (
    AssetError,
    BadMagic,
    CalibrationParseError,
    DimensionMismatch,
    GeometryError,
    IoFailure,
    MalformedFile,
    MalformedScan,
    MissingFile,
    TrajectoryParseError,
    TruncatedFile,
)
from frames import FrameBundle
from gaussian_map import GaussianSet
from geometry import CameraIntrinsics, PointCloud, SE3Pose

CALIB_FILE = "calib.txt"
TIMES_FILE = "times.txt"
GROUNDTRUTH_FILE = "groundtruth.txt"


# ---------------------------------------------------------------- raw files


def _read_bytes(path) -> bytes:
    p = Path(path)
    if not p.exists():
        raise MissingFile("file not found", p)
    try:
        return p.read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read: {e}", p) from None


def _write_bytes(path, data: bytes):
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
    except OSError as e:
        raise IoFailure(f"cannot write: {e}", p) from None


def load_scan(path) -> PointCloud:
    """KITTI velodyne scan: little-endian float32 (x, y, z, intensity) records"""
    data = _read_bytes(path)
    if len(data) % 16:
        raise MalformedScan(f"size {len(data)} bytes is not a multiple of 16", path)
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise MalformedScan("scan contains non-finite values", path)
    try:
        return PointCloud(arr[:, :3], arr[:, 3])
    except GeometryError as e:
        raise MalformedScan(str(e), path) from None


def write_scan(path, cloud: PointCloud):
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    arr = np.concatenate([cloud.points, inten[:, None]], axis=1).astype("<f4")
    _write_bytes(path, arr.tobytes())


def _check_magic(data: bytes, magic: bytes, path):
    if len(data) < len(magic):
        if magic.startswith(data):
            raise TruncatedFile("file ends inside the magic number", path)
        raise BadMagic(f"expected magic {magic!r}", path)
    if data[: len(magic)] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {data[:len(magic)]!r}", path)


def _payload(data: bytes, offset: int, count: int, path) -> np.ndarray:
    need = offset + 4 * count
    if len(data) < need:
        raise TruncatedFile(f"payload needs {need} bytes, file has {len(data)}", path)
    if len(data) > need:
        raise MalformedFile(f"{len(data) - need} trailing bytes after payload", path)
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    if not np.all(np.isfinite(arr)):
        raise MalformedFile("payload contains non-finite values", path)
    return arr.astype(np.float64)


def load_feature_map(path) -> np.ndarray:
    """'LVDF', u32 H, W, N_d, then row-major float32 -> H×W×N_d"""
    data = _read_bytes(path)
    _check_magic(data, FEATURE_MAGIC, path)
    if len(data) < 16:
        raise TruncatedFile("header is shorter than 16 bytes", path)
    H, W, D = struct.unpack_from("<III", data, 4)
    return _payload(data, 16, H * W * D, path).reshape(H, W, D)


def write_feature_map(path, features: np.ndarray):
    features = np.asarray(features)
    if features.ndim != 3:
        raise DimensionMismatch(f"feature map must be H×W×N_d, got {features.shape}", path)
    H, W, D = features.shape
    _write_bytes(path, FEATURE_MAGIC + struct.pack("<III", H, W, D) + features.astype("<f4").tobytes())


def load_depth(path) -> np.ndarray:
    """u32 H, W then row-major float32 meters; 0 marks invalid"""
    data = _read_bytes(path)
    if len(data) < 8:
        raise TruncatedFile("depth header is shorter than 8 bytes", path)
    H, W = struct.unpack_from("<II", data, 0)
    return _payload(data, 8, H * W, path).reshape(H, W)


def write_depth(path, depth: np.ndarray):
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise DimensionMismatch(f"depth must be H×W, got {depth.shape}", path)
    H, W = depth.shape
    _write_bytes(path, struct.pack("<II", H, W) + depth.astype("<f4").tobytes())


def _open_image(path) -> Image.Image:
    p = Path(path)
    if not p.exists():
        raise MissingFile("image not found", p)
    try:
        img = Image.open(p)
        img.load()
        return img
    except Exception as e:
        raise MalformedFile(f"unreadable image: {e}", p) from None


def read_image(path) -> np.ndarray:
    return np.asarray(_open_image(path).convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, image: np.ndarray):
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    _save_png(path, Image.fromarray(arr, mode="RGB"))


def _save_png(path, img: Image.Image):
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        img.save(p, format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write image: {e}", p) from None


def read_labels(path) -> np.ndarray:
    img = _open_image(path)
    if img.mode not in ("L", "P"):
        raise MalformedFile(f"label image must be 8-bit single channel, got mode {img.mode}", path)
    return np.asarray(img, dtype=np.uint8).copy()


def write_labels(path, labels: np.ndarray):
    _save_png(path, Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L"))


def read_mask(path) -> np.ndarray:
    """8-bit mask image, 0 static / 255 dynamic -> bool"""
    return read_labels(path) > 127


def write_mask(path, mask: np.ndarray):
    write_labels(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


# ---------------------------------------------------------------- calibration


def _floats(tokens: Sequence[str], count: int, key: str, path) -> np.ndarray:
    try:
        vals = np.array([float(t) for t in tokens])
    except ValueError:
        raise CalibrationParseError(f"non-numeric values for {key}", path) from None
    if vals.shape[0] != count or not np.all(np.isfinite(vals)):
        raise CalibrationParseError(f"{key} needs {count} finite values, got {len(tokens)}", path)
    return vals


def load_calibration(path) -> Tuple[CameraIntrinsics, SE3Pose]:
    """calib.txt with P2 (3x4), Tr (3x4 LiDAR-to-camera) and image_size W H"""
    p = Path(path)
    if not p.exists():
        raise MissingFile("calibration file not found", p)
    try:
        text = p.read_text()
    except (OSError, UnicodeDecodeError) as e:
        raise CalibrationParseError(f"unreadable calibration: {e}", p) from None
    entries: Dict[str, List[str]] = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, rest = line.split(":", 1)
        entries[key.strip()] = rest.split()
    for key in ("P2", "Tr", "image_size"):
        if key not in entries:
            raise CalibrationParseError(f"missing '{key}' entry", p)
    P = _floats(entries["P2"], 12, "P2", p).reshape(3, 4)
    Tr = _floats(entries["Tr"], 12, "Tr", p).reshape(3, 4)
    size = _floats(entries["image_size"], 2, "image_size", p)
    try:
        K = CameraIntrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], int(size[0]), int(size[1]))
        T = np.eye(4)
        T[:3, :] = Tr
        extrinsic = SE3Pose.from_matrix(T)
    except (GeometryError, ValueError) as e:
        raise CalibrationParseError(str(e), p) from None
    return K, extrinsic


def write_calibration(path, K: CameraIntrinsics, extrinsic: SE3Pose):
    P = np.zeros((3, 4))
    P[:3, :3] = K.matrix()
    Tr = extrinsic.matrix()[:3, :]
    fmt = lambda a: " ".join(f"{v:.17g}" for v in a.ravel())  # noqa: E731
    text = f"P2: {fmt(P)}\nTr: {fmt(Tr)}\nimage_size: {K.width} {K.height}\n"
    _write_bytes(path, text.encode())


# ---------------------------------------------------------------- trajectories


def _fmt_time(t: float) -> str:
    s = f"{t:.6f}"
    return s if float(s) == t else f"{t:.17g}"


def write_trajectory(poses: Sequence[SE3Pose], timestamps: Sequence[float], path):
    """TUM format: timestamp tx ty tz qx qy qz qw"""
    if len(poses) != len(timestamps):
        raise ValueError("poses and timestamps differ in length")
    lines = []
    for t, p in zip(timestamps, poses):
        w, x, y, z = p.rotation
        vals = list(p.translation) + [x, y, z, w]
        lines.append(_fmt_time(float(t)) + " " + " ".join(f"{v + 0.0:.17g}" for v in vals))
    _write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode())


def read_trajectory(path) -> Tuple[List[SE3Pose], List[float]]:
    data = _read_bytes(path)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise TrajectoryParseError("trajectory is not valid UTF-8 text", path) from None
    poses, stamps = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryParseError(f"line {lineno}: expected 8 fields, got {len(parts)}", path)
        try:
            vals = [float(v) for v in parts]
            t, tx, ty, tz, qx, qy, qz, qw = vals
            poses.append(SE3Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
        except (ValueError, GeometryError) as e:
            raise TrajectoryParseError(f"line {lineno}: {e}", path) from None
        stamps.append(t)
    return poses, stamps


def parse_pose_string(text: str) -> SE3Pose:
    """'tx ty tz qx qy qz qw' -> SE3Pose"""
    parts = text.replace(",", " ").split()
    if len(parts) != 7:
        raise ValueError(f"pose needs 7 numbers 'tx ty tz qx qy qz qw', got {len(parts)}")
    try:
        tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
        return SE3Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
    except GeometryError as e:
        raise ValueError(str(e)) from None


# ---------------------------------------------------------------- Gaussian maps

PLY_FIELDS = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity", "red", "green", "blue"]
)


def sidecar_path(ply_path) -> Path:
    return Path(ply_path).with_suffix(".lvdg")


def export_ply(gaussians: GaussianSet, path):
    """One vertex per Gaussian: position, log-scale, quaternion, opacity logit, RGB"""
    attrs = np.concatenate(
        [
            gaussians.positions,
            gaussians.log_scales,
            gaussians.rotations,
            gaussians.opacity_logits[:, None],
            gaussians.colors,
        ],
        axis=1,
    )
    elements = np.empty(len(gaussians), dtype=[(f, "f4") for f in PLY_FIELDS])
    for i, name in enumerate(PLY_FIELDS):
        elements[name] = attrs[:, i]
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        PlyData([PlyElement.describe(elements, "vertex")]).write(str(p))
    except OSError as e:
        raise IoFailure(f"cannot write PLY: {e}", p) from None


def write_sidecar(path, gaussians: GaussianSet):
    """'LVDG', u32 count, L, N_d, then per Gaussian L semantic logits + N_d features"""
    n, L, D = len(gaussians), gaussians.num_classes, gaussians.feature_dim
    rows = np.concatenate([gaussians.semantic_logits, gaussians.features], axis=1).astype("<f4")
    _write_bytes(path, SIDECAR_MAGIC + struct.pack("<III", n, L, D) + rows.tobytes())


def read_sidecar(path) -> Tuple[np.ndarray, np.ndarray]:
    data = _read_bytes(path)
    _check_magic(data, SIDECAR_MAGIC, path)
    if len(data) < 16:
        raise TruncatedFile("header is shorter than 16 bytes", path)
    n, L, D = struct.unpack_from("<III", data, 4)
    rows = _payload(data, 16, n * (L + D), path).reshape(n, L + D)
    return rows[:, :L], rows[:, L:]


def save_gaussians(gaussians: GaussianSet, ply_path):
    export_ply(gaussians, ply_path)
    write_sidecar(sidecar_path(ply_path), gaussians)


def load_gaussians(ply_path, num_classes: int = 1, feature_dim: int = 1) -> GaussianSet:
    """Read a PLY map and its sidecar; without a sidecar the channels are zero"""
    p = Path(ply_path)
    if not p.exists():
        raise MissingFile("map PLY not found", p)
    try:
        vertex = PlyData.read(str(p))["vertex"]
        cols = np.stack([np.asarray(vertex[name], dtype=np.float64) for name in PLY_FIELDS], axis=1)
    except Exception as e:
        raise MalformedFile(f"unreadable PLY: {e}", p) from None
    n = cols.shape[0]
    side = sidecar_path(p)
    if side.exists():
        semantic, features = read_sidecar(side)
        if semantic.shape[0] != n:
            raise DimensionMismatch(f"sidecar holds {semantic.shape[0]} rows, PLY has {n}", side)
    else:
        semantic, features = np.zeros((n, num_classes)), np.zeros((n, feature_dim))
    return GaussianSet(cols[:, 0:3], cols[:, 3:6], cols[:, 6:10], cols[:, 10], cols[:, 11:14], semantic, features)


def write_render_channels(out_dir, stem: str, channels: Dict[str, np.ndarray]):
    """color -> PNG, depth -> float32 binary, semantic argmax -> 8-bit label PNG"""
    out = Path(out_dir)
    if "color" in channels:
        write_image(out / f"{stem}.png", channels["color"])
    if "depth" in channels:
        write_depth(out / f"{stem}_depth.bin", channels["depth"])
    if "semantic_prob" in channels:
        write_labels(out / f"{stem}_semantic.png", np.argmax(channels["semantic_prob"], axis=-1))


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetLayout:
    root: Path
    image_dir: str = "image_2"
    scan_dir: str = "velodyne"
    depth_dir: str = "depth"
    semantic_dir: str = "semantic"
    feature_dir: str = "features"
    mask_dir: str = "masks"
    motion_mask_dir: str = "motion_masks"
    calibration: str = CALIB_FILE
    groundtruth: str = GROUNDTRUTH_FILE
    times: str = TIMES_FILE

    def frame_files(self, index: int) -> Dict[str, Path]:
        name = f"{index:06d}"
        r = self.root
        return {
            "image": r / self.image_dir / f"{name}.png",
            "scan": r / self.scan_dir / f"{name}.bin",
            "depth": r / self.depth_dir / f"{name}.bin",
            "semantic": r / self.semantic_dir / f"{name}.png",
            "features": r / self.feature_dir / f"{name}.lvdf",
            "mask": r / self.mask_dir / f"{name}.png",
        }

    def motion_mask(self, index: int) -> Path:
        return self.root / self.motion_mask_dir / f"{index:06d}.png"


@dataclass
class Dataset:
    """Lazily loading, validating frame sequence"""

    layout: DatasetLayout
    K: CameraIntrinsics
    extrinsic: SE3Pose  # LiDAR frame -> camera frame
    num_frames: int
    timestamps: List[float]
    gt_poses: Optional[List[SE3Pose]] = None
    feature_dim: Optional[int] = None
    _limit: Optional[int] = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.num_frames if self._limit is None else min(self._limit, self.num_frames)

    def limit(self, n: Optional[int]) -> "Dataset":
        self._limit = n
        return self

    def __iter__(self) -> Iterator[FrameBundle]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, index: int) -> FrameBundle:
        if not 0 <= index < self.num_frames:
            raise IndexError(index)
        files = self.layout.frame_files(index)
        features = load_feature_map(files["features"])
        if self.feature_dim is not None and features.shape[2] != self.feature_dim:
            raise DimensionMismatch(
                f"feature dimension {features.shape[2]}, expected {self.feature_dim}", files["features"]
            )
        frame = FrameBundle(
            index=index,
            image=read_image(files["image"]),
            scan=load_scan(files["scan"]),
            dense_depth=load_depth(files["depth"]),
            semantic_labels=read_labels(files["semantic"]),
            features=features,
            explicit_mask=read_mask(files["mask"]),
            timestamp=self.timestamps[index],
            gt_pose=None if self.gt_poses is None else self.gt_poses[index],
            source=str(self.layout.root),
        )
        motion = self.layout.motion_mask(index)
        if motion.exists():
            frame.motion_mask = read_mask(motion)
        for name, arr in (
            ("image", frame.image.shape[:2]),
            ("depth", frame.dense_depth.shape),
            ("semantic", frame.semantic_labels.shape),
            ("features", frame.features.shape[:2]),
            ("mask", frame.explicit_mask.shape),
        ):
            if arr != self.K.shape:
                raise DimensionMismatch(f"size {arr} differs from calibration {self.K.shape}", files[name])
        return frame


def open_dataset(root, config: Optional[PipelineConfig] = None) -> Dataset:
    """Validate the layout of a dataset directory and return a lazy frame sequence"""
    layout = DatasetLayout(Path(root))
    K, extrinsic = load_calibration(layout.root / layout.calibration)

    image_dir = layout.root / layout.image_dir
    names = sorted(p.stem for p in image_dir.glob("*.png")) if image_dir.is_dir() else []
    n = len(names)
    if n == 0:
        raise MissingFile("no frames found", image_dir)
    for i in range(n):
        for path in layout.frame_files(i).values():
            if not path.exists():
                raise MissingFile("frame asset missing (indices must be contiguous from 0)", path)

    times_path = layout.root / layout.times
    timestamps = [float(i) for i in range(n)]
    if times_path.exists():
        try:
            timestamps = [float(x) for x in times_path.read_text().split()]
        except ValueError:
            raise MalformedFile("times.txt holds non-numeric entries", times_path) from None
        if len(timestamps) != n:
            raise DimensionMismatch(f"{len(timestamps)} timestamps for {n} frames", times_path)

    gt_poses = None
    gt_path = layout.root / layout.groundtruth
    if gt_path.exists():
        gt_poses, _ = read_trajectory(gt_path)
        if len(gt_poses) != n:
            raise DimensionMismatch(f"{len(gt_poses)} ground-truth poses for {n} frames", gt_path)

    return Dataset(
        layout=layout,
        K=K,
        extrinsic=extrinsic,
        num_frames=n,
        timestamps=timestamps,
        gt_poses=gt_poses,
        feature_dim=None if config is None else config.feature_dim,
    )


__all__ = [
    "AssetError",
    "Dataset",
    "DatasetLayout",
    "open_dataset",
    "load_scan",
    "write_scan",
    "load_feature_map",
    "write_feature_map",
    "load_depth",
    "write_depth",
    "read_image",
    "write_image",
    "read_labels",
    "write_labels",
    "read_mask",
    "write_mask",
    "load_calibration",
    "write_calibration",
    "write_trajectory",
    "read_trajectory",
    "parse_pose_string",
    "export_ply",
    "write_sidecar",
    "read_sidecar",
    "save_gaussians",
    "load_gaussians",
    "write_render_channels",
]
