"""Scan-to-map LiDAR registration in the KISS-ICP style.

Point-to-point ICP against a sparse voxel map, Geman-McClure weighted
Gauss-Newton on SE(3), with the KISS-ICP adaptive correspondence threshold.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from errors import Diverged, EmptyInput
from geometry import PointCloud, SE3Pose, se3_apply, se3_compose, se3_exp, se3_inverse

VoxelKey = Tuple[int, int, int]

DIVERGENCE_PATIENCE = 5
MAX_STEP_HALVINGS = 5
NEAREST_CANDIDATES = 8


def _voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(points / voxel_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Keep the first point falling in each voxel, preserving input order"""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return PointCloud.empty()
    keys = _voxel_keys(cloud.points, voxel_size)
    _, first = np.unique(keys, axis=0, return_index=True)
    return cloud.select(np.sort(first))


class VoxelHashMap:
    """Sparse voxel grid mapping integer voxel coordinates to bounded point lists"""

    def __init__(self, voxel_size: float = 1.0, max_points_per_voxel: int = 20, map_range: float = 100.0):
        if voxel_size <= 0 or max_points_per_voxel < 1 or map_range <= 0:
            raise ValueError("invalid voxel map parameters")
        self.voxel_size = float(voxel_size)
        self.max_points_per_voxel = int(max_points_per_voxel)
        self.map_range = float(map_range)
        self._voxels: Dict[VoxelKey, List[np.ndarray]] = {}
        self._provenance: Dict[VoxelKey, List[tuple]] = {}
        self._cache = None

    def __len__(self) -> int:
        return sum(len(v) for v in self._voxels.values())

    def empty(self) -> bool:
        return not self._voxels

    @property
    def occupied_voxels(self) -> int:
        return len(self._voxels)

    def voxels(self) -> Dict[VoxelKey, List[np.ndarray]]:
        return self._voxels

    def provenance(self) -> List[tuple]:
        return [tag for tags in self._provenance.values() for tag in tags]

    def clear(self):
        self._voxels.clear()
        self._provenance.clear()
        self._cache = None

    def add_points(self, points: np.ndarray, tags: Optional[List[tuple]] = None):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        keys = _voxel_keys(points, self.voxel_size)
        for i, key in enumerate(map(tuple, keys)):
            bucket = self._voxels.get(key)
            if bucket is None:
                bucket = self._voxels[key] = []
                self._provenance[key] = []
            if len(bucket) < self.max_points_per_voxel:
                bucket.append(points[i].copy())
                if tags is not None:
                    self._provenance[key].append(tags[i])
        self._cache = None

    def remove_far_away(self, origin: np.ndarray):
        """Drop voxels whose first point lies beyond map_range of origin"""
        origin = np.asarray(origin, dtype=np.float64)
        far = [k for k, pts in self._voxels.items() if np.linalg.norm(pts[0] - origin) > self.map_range]
        for k in far:
            del self._voxels[k]
            self._provenance.pop(k, None)
        if far:
            self._cache = None

    def point_cloud(self) -> np.ndarray:
        return self._index()[0]

    def _index(self):
        if self._cache is None:
            if not self._voxels:
                pts = np.zeros((0, 3))
            else:
                pts = np.vstack([np.vstack(v) for v in self._voxels.values()])
            keys = _voxel_keys(pts, self.voxel_size)
            tree = cKDTree(pts) if len(pts) else None
            self._cache = (pts, keys, tree)
        return self._cache

    def nearest(self, query: np.ndarray):
        """Nearest map point within the 3x3x3 voxel neighbourhood of each query.

        The KD-tree's NEAREST_CANDIDATES closest points are filtered to the
        neighbourhood; equal distances resolve to the lowest point index.
        Returns (matched points (N,3), distances (N,), found (N,) bool).
        """
        pts, keys, tree = self._index()
        n = query.shape[0]
        if tree is None or n == 0:
            return np.zeros((n, 3)), np.full(n, np.inf), np.zeros(n, dtype=bool)
        k = min(NEAREST_CANDIDATES, len(pts))
        dist, idx = tree.query(query, k=k)
        dist, idx = dist.reshape(n, k), idx.reshape(n, k)
        qkeys = _voxel_keys(query, self.voxel_size)
        adjacent = np.all(np.abs(keys[idx] - qkeys[:, None, :]) <= 1, axis=2)
        dist = np.where(adjacent, dist, np.inf)
        best = dist.min(axis=1)
        found = np.isfinite(best)
        chosen = np.where(dist == best[:, None], idx, len(pts)).min(axis=1)
        chosen = np.where(found, chosen, 0)
        return pts[chosen], np.where(found, best, np.inf), found


class AdaptiveThreshold:
    """Correspondence threshold driven by the observed model deviation"""

    def __init__(self, initial_threshold: float = 2.0, min_motion: float = 0.1, max_range: float = 100.0):
        self.initial_threshold = float(initial_threshold)
        self.min_motion = float(min_motion)
        self.max_range = float(max_range)
        self.model_sse = 0.0
        self.num_samples = 0
        self.history: List[float] = []

    def model_error(self, deviation: SE3Pose) -> float:
        theta = deviation.angle()
        delta_rot = 2.0 * self.max_range * math.sin(theta / 2.0)
        delta_trans = float(np.linalg.norm(deviation.translation))
        return delta_trans + delta_rot

    def update_model_deviation(self, deviation: SE3Pose):
        err = self.model_error(deviation)
        self.history.append(err)
        if err > self.min_motion:
            self.model_sse += err * err
            self.num_samples += 1

    @property
    def current_threshold(self) -> float:
        if self.num_samples < 1:
            return self.initial_threshold
        return max(math.sqrt(self.model_sse / self.num_samples), 1e-6)


def predict_initial(prev: Optional[SE3Pose], prev_prev: Optional[SE3Pose]) -> SE3Pose:
    """Constant-velocity prediction prev ∘ (prev_prev⁻¹ ∘ prev)"""
    if prev is None:
        return SE3Pose.identity()
    if prev_prev is None:
        return prev
    return se3_compose(prev, se3_compose(se3_inverse(prev_prev), prev))


@dataclass
class RegistrationResult:
    pose: SE3Pose
    converged: bool
    iterations: int
    costs: List[float] = field(default_factory=list)
    correspondences: int = 0


def _robust_cost(sq_dist: np.ndarray, found: np.ndarray, gate: float, kernel: float) -> float:
    k = kernel * kernel
    e = np.where(found, np.minimum(sq_dist, gate * gate), gate * gate)
    return float(np.sum(k * e / (2.0 * (k + e))))


def register_scan(
    voxel_map: VoxelHashMap,
    scan: PointCloud,
    init: SE3Pose,
    thr: AdaptiveThreshold,
    max_iterations: int = 100,
    convergence: float = 1e-4,
) -> RegistrationResult:
    """Align a sensor-frame scan to the world-frame voxel map, starting at init"""
    if voxel_map.empty():
        raise EmptyInput("registration map is empty")
    if len(scan) == 0:
        raise EmptyInput("scan is empty")

    sigma = thr.current_threshold
    gate = 3.0 * sigma
    kernel = sigma / 3.0
    k2 = kernel * kernel
    src = scan.points

    def evaluate(pose: SE3Pose):
        world = se3_apply(pose, src)
        matched, dist, found = voxel_map.nearest(world)
        return world, matched, dist, found, _robust_cost(dist * dist, found, gate, kernel)

    pose = init
    world, matched, dist, found, cost = evaluate(pose)
    costs = [cost]
    grow = 0
    prev_norm = math.inf
    converged = False
    iterations = 0
    used = 0

    for iterations in range(1, max_iterations + 1):
        use = found & (dist < gate)
        used = int(use.sum())
        if used < 3:
            break
        p = world[use]
        r = p - matched[use]
        sq = np.einsum("ij,ij->i", r, r)
        w = k2 * k2 / (k2 + sq) ** 2
        J = np.zeros((p.shape[0], 3, 6))
        J[:, :, :3] = np.eye(3)
        J[:, :, 3:] = _batch_neg_skew(p)
        H = np.einsum("n,nki,nkj->ij", w, J, J)
        g = np.einsum("n,nki,nk->i", w, J, r)
        try:
            dx = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(H, -g, rcond=None)[0]

        scale = 1.0
        accepted = False
        for _ in range(MAX_STEP_HALVINGS + 1):
            cand = se3_compose(se3_exp(scale * dx), pose)
            c_world, c_matched, c_dist, c_found, c_cost = evaluate(cand)
            if c_cost <= cost:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            converged = True
            break

        norm = float(np.linalg.norm(scale * dx))
        grow = grow + 1 if norm > prev_norm else 0
        if grow >= DIVERGENCE_PATIENCE:
            raise Diverged(f"update norm grew for {grow} consecutive iterations")
        prev_norm = norm

        pose = cand
        world, matched, dist, found, cost = c_world, c_matched, c_dist, c_found, c_cost
        costs.append(cost)
        if norm < convergence:
            converged = True
            break

    return RegistrationResult(pose, converged, iterations, costs, used)


def _batch_neg_skew(p: np.ndarray) -> np.ndarray:
    out = np.zeros((p.shape[0], 3, 3))
    out[:, 0, 1] = p[:, 2]
    out[:, 0, 2] = -p[:, 1]
    out[:, 1, 0] = -p[:, 2]
    out[:, 1, 2] = p[:, 0]
    out[:, 2, 0] = p[:, 1]
    out[:, 2, 1] = -p[:, 0]
    return out


def update_map(
    voxel_map: VoxelHashMap,
    scan: PointCloud,
    pose: SE3Pose,
    static_mask: Optional[np.ndarray] = None,
    tags: Optional[List[tuple]] = None,
) -> VoxelHashMap:
    """Insert the static points of a sensor-frame scan at pose, then evict far voxels"""
    keep = np.ones(len(scan), dtype=bool) if static_mask is None else np.asarray(static_mask, dtype=bool)
    if keep.shape[0] != len(scan):
        raise ValueError("static mask length differs from scan size")
    if keep.any():
        kept_tags = None if tags is None else [t for t, k in zip(tags, keep) if k]
        voxel_map.add_points(se3_apply(pose, scan.points[keep]), kept_tags)
    voxel_map.remove_far_away(pose.translation)
    return voxel_map
