"""Gaussian primitives, struct-of-arrays storage and submap partitioning."""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import IGNORE_LABEL
from errors import DimensionMismatch
from frames import FrameBundle
from geometry import CameraIntrinsics, PointCloud, SE3Pose, pixel_index, project_points, se3_apply
from utils import logit, sigmoid

SCALE_MIN = 1e-4
SCALE_MAX = 50.0
LOG_SCALE_MIN = math.log(SCALE_MIN)
LOG_SCALE_MAX = math.log(SCALE_MAX)
ONE_HOT_LOGIT = 10.0


@dataclass(frozen=True)
class SemanticConfig:
    num_classes: int
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


@dataclass(frozen=True)
class FeatureConfig:
    feature_dim: int

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity_logit: float
    color: np.ndarray
    semantic_logits: np.ndarray
    feature: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianSet:
    """Row-aligned attribute arrays, one row per Gaussian"""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    semantic_logits: np.ndarray
    features: np.ndarray
    provenance: Optional[np.ndarray] = None  # (N, 2) int64 (frame, point), -1 unknown

    ATTRIBUTES = (
        "positions",
        "log_scales",
        "rotations",
        "opacity_logits",
        "colors",
        "semantic_logits",
        "features",
    )

    def __post_init__(self):
        n = self.positions.shape[0]
        for name in self.ATTRIBUTES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
            setattr(self, name, arr)
        if self.provenance is None:
            self.provenance = np.full((n, 2), -1, dtype=np.int64)

    @classmethod
    def empty(cls, num_classes: int, feature_dim: int) -> "GaussianSet":
        return cls(
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 4)),
            np.zeros(0),
            np.zeros((0, 3)),
            np.zeros((0, num_classes)),
            np.zeros((0, feature_dim)),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], num_classes: int, feature_dim: int) -> "GaussianSet":
        if not gaussians:
            return cls.empty(num_classes, feature_dim)
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            np.stack([g.semantic_logits for g in gaussians]),
            np.stack([g.feature for g in gaussians]),
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.positions[i].copy(),
            self.log_scales[i].copy(),
            self.rotations[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
            self.semantic_logits[i].copy(),
            self.features[i].copy(),
        )

    def __iter__(self) -> Iterator[Gaussian]:
        for i in range(len(self)):
            yield self[i]

    @property
    def num_classes(self) -> int:
        return self.semantic_logits.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, a).copy() for a in self.ATTRIBUTES), provenance=self.provenance.copy())

    def select(self, keep: np.ndarray) -> "GaussianSet":
        return GaussianSet(*(getattr(self, a)[keep] for a in self.ATTRIBUTES), provenance=self.provenance[keep])

    def extend(self, other: "GaussianSet"):
        for a in self.ATTRIBUTES:
            setattr(self, a, np.concatenate([getattr(self, a), getattr(other, a)], axis=0))
        self.provenance = np.concatenate([self.provenance, other.provenance], axis=0)

    @staticmethod
    def concat(sets: Sequence["GaussianSet"], num_classes: int, feature_dim: int) -> "GaussianSet":
        out = GaussianSet.empty(num_classes, feature_dim)
        for s in sets:
            out.extend(s)
        return out

    def clamp_invariants(self):
        """Renormalize quaternions, clamp scales to [1e-4, 50] m and colors to [0, 1]"""
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        bad = norms[:, 0] < 1e-12
        self.rotations = np.where(bad[:, None], np.array([1.0, 0.0, 0.0, 0.0]), self.rotations / np.maximum(norms, 1e-12))
        self.log_scales = np.clip(self.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX)
        self.colors = np.clip(self.colors, 0.0, 1.0)

    def equals(self, other: "GaussianSet") -> bool:
        """Bitwise attribute equality"""
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in self.ATTRIBUTES)


class SubmapState(Enum):
    ACTIVE = "active"
    FROZEN = "frozen"


@dataclass
class Submap:
    key: Tuple[int, int, int]
    origin: np.ndarray
    extent: float
    gaussians: GaussianSet
    state: SubmapState = SubmapState.ACTIVE

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all(np.abs(points - self.origin) <= self.extent, axis=1)

    def insert(self, gaussians: GaussianSet) -> int:
        """Append the Gaussians lying inside origin ± extent; returns how many were kept"""
        if self.state is SubmapState.FROZEN:
            raise RuntimeError(f"submap {self.key} is frozen")
        inside = self.contains(gaussians.positions)
        self.gaussians.extend(gaussians.select(inside))
        return int(inside.sum())

    def __len__(self) -> int:
        return len(self.gaussians)


@dataclass
class SubmapWorld:
    num_classes: int
    feature_dim: int
    submaps: Dict[Tuple[int, int, int], Submap] = field(default_factory=dict)
    active_key: Optional[Tuple[int, int, int]] = None

    @property
    def active_submap(self) -> Optional[Submap]:
        return None if self.active_key is None else self.submaps[self.active_key]

    def all_gaussians(self) -> GaussianSet:
        return GaussianSet.concat([s.gaussians for s in self.submaps.values()], self.num_classes, self.feature_dim)

    def frozen_gaussians(self) -> GaussianSet:
        return GaussianSet.concat(
            [s.gaussians for s in self.submaps.values() if s.state is SubmapState.FROZEN],
            self.num_classes,
            self.feature_dim,
        )

    @property
    def gaussian_count(self) -> int:
        return sum(len(s) for s in self.submaps.values())


def assign_submap(world: SubmapWorld, pose: SE3Pose, extent: float) -> Submap:
    """Activate the submap whose grid cell holds the pose, freezing the previous one"""
    if extent <= 0:
        raise ValueError("extent must be positive")
    key = tuple(int(k) for k in np.round(pose.translation / extent))
    if world.active_key is not None and world.active_key != key:
        world.submaps[world.active_key].state = SubmapState.FROZEN
    submap = world.submaps.get(key)
    if submap is None:
        submap = Submap(key, np.array(key, dtype=np.float64) * extent, float(extent), GaussianSet.empty(world.num_classes, world.feature_dim))
        world.submaps[key] = submap
    submap.state = SubmapState.ACTIVE
    world.active_key = key
    return submap


def init_from_lidar(
    scan: PointCloud,
    pose: SE3Pose,
    K: CameraIntrinsics,
    frame: FrameBundle,
    refined_mask: np.ndarray,
    num_classes: int,
    scale_factor: float = 1.0,
) -> GaussianSet:
    """Seed one Gaussian per camera-frame LiDAR point that lands on an unmasked pixel"""
    frame.validate(K)
    refined_mask = np.asarray(refined_mask, dtype=bool)
    if refined_mask.shape != K.shape:
        raise DimensionMismatch(f"refined mask has shape {refined_mask.shape}, expected {K.shape}")

    uv, depth, in_front = project_points(K, scan.points)
    rows, cols, inside = pixel_index(K, uv)
    keep = in_front & inside
    keep[keep] &= ~refined_mask[rows[keep], cols[keep]]
    idx = np.nonzero(keep)[0]
    n = idx.shape[0]
    r, c, z = rows[idx], cols[idx], depth[idx]

    labels = frame.semantic_labels[r, c].astype(np.int64)
    semantic = np.zeros((n, num_classes))
    valid = (labels != IGNORE_LABEL) & (labels < num_classes)
    semantic[np.nonzero(valid)[0], labels[valid]] = ONE_HOT_LOGIT

    log_scale = np.log(np.clip(scale_factor * z / K.fx, SCALE_MIN, SCALE_MAX))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    provenance = np.stack([np.full(n, frame.index, dtype=np.int64), idx.astype(np.int64)], axis=1)
    return GaussianSet(
        se3_apply(pose, scan.points[idx]),
        np.repeat(log_scale[:, None], 3, axis=1),
        rotations,
        np.full(n, logit(0.5)),
        frame.image[r, c].astype(np.float64),
        semantic,
        frame.features[r, c].astype(np.float64),
        provenance=provenance,
    )


def prune(submap: Submap, opacity_min: float) -> int:
    """Remove Gaussians whose opacity fell below opacity_min"""
    if not 0.0 < opacity_min < 1.0:
        raise ValueError("opacity_min must lie in (0, 1)")
    keep = submap.gaussians.opacities >= opacity_min
    removed = int((~keep).sum())
    if removed:
        submap.gaussians = submap.gaussians.select(keep)
    return removed
