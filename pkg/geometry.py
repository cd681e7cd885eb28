"""SE(3) pose algebra, pinhole camera model and point-cloud containers.

Conventions: camera frame is z-forward, x-right, y-down. Poses are
camera-to-world unless stated otherwise. Quaternions are stored as
(w, x, y, z). Tangent vectors are ordered (translation, rotation).
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from errors import BehindCamera, GeometryError

PROJECT_EPS = 1e-8


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise GeometryError(f"invalid quaternion {q}")
    q = q / n
    # one representative per rotation: first non-zero component positive
    for c in q:
        if c != 0.0:
            if c < 0.0:
                q = -q
            break
    return q


def _rot_from_wxyz(q: np.ndarray) -> Rotation:
    return Rotation.from_quat([q[1], q[2], q[3], q[0]])


def _wxyz_from_rot(r: Rotation) -> np.ndarray:
    x, y, z, w = r.as_quat()
    return np.array([w, x, y, z])


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=np.float64
    )


@dataclass(frozen=True)
class SE3Pose:
    """Rigid-body transform x -> R x + t with a unit-quaternion rotation"""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError(f"non-finite translation {t}")
        object.__setattr__(self, "rotation", _readonly(_canonical_quat(np.reshape(self.rotation, 4))))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls()

    @classmethod
    def from_rotation_translation(cls, rot: np.ndarray, t) -> "SE3Pose":
        return cls(_wxyz_from_rot(Rotation.from_matrix(rot)), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "SE3Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls.from_rotation_translation(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> "SE3Pose":
        return cls(_wxyz_from_rot(Rotation.from_rotvec(rotvec)), t)

    @property
    def rot(self) -> Rotation:
        return _rot_from_wxyz(self.rotation)

    def rotation_matrix(self) -> np.ndarray:
        return self.rot.as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "SE3Pose":
        return se3_inverse(self)

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        return se3_compose(self, other)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return se3_apply(self, x)

    def angle(self) -> float:
        """Rotation angle in radians"""
        return float(np.linalg.norm(self.rot.as_rotvec()))


def se3_compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """a ∘ b: applies b first, then a"""
    r = a.rot * b.rot
    t = a.rot.apply(b.translation) + a.translation
    return SE3Pose(_wxyz_from_rot(r), t)


def se3_inverse(p: SE3Pose) -> SE3Pose:
    rinv = p.rot.inv()
    return SE3Pose(_wxyz_from_rot(rinv), -rinv.apply(p.translation))


def se3_apply(p: SE3Pose, x: np.ndarray) -> np.ndarray:
    """R·x + t for a single 3-vector or an (N, 3) array"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return p.rot.apply(x) + p.translation
    if x.shape[0] == 0:
        return np.zeros((0, 3))
    return p.rot.apply(x) + p.translation


transform_points = se3_apply


def relative_error(a: SE3Pose, b: SE3Pose) -> Tuple[float, float]:
    """(rotation angle, translation norm) of a⁻¹ ∘ b"""
    d = se3_compose(se3_inverse(a), b)
    return d.angle(), float(np.linalg.norm(d.translation))


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K @ K
    )


def se3_exp(xi: np.ndarray) -> SE3Pose:
    """Exponential map of a (translation, rotation) tangent vector"""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return SE3Pose(_wxyz_from_rot(Rotation.from_rotvec(phi)), _so3_left_jacobian(phi) @ rho)


def se3_log(p: SE3Pose) -> np.ndarray:
    phi = p.rot.as_rotvec()
    rho = np.linalg.solve(_so3_left_jacobian(phi), p.translation)
    return np.concatenate([rho, phi])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be >= 1, got {self.width}x{self.height}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def project(K: CameraIntrinsics, x_cam) -> Tuple[float, float, float]:
    x, y, z = (float(c) for c in np.asarray(x_cam, dtype=np.float64).reshape(3))
    if z <= PROJECT_EPS:
        raise BehindCamera(f"point at depth {z} is behind the camera")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, z


def unproject(K: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def project_points(K: CameraIntrinsics, pts_cam: np.ndarray):
    """Vectorized projection: (uv (N,2), depth (N,), in_front (N,) bool)"""
    pts_cam = np.asarray(pts_cam, dtype=np.float64).reshape(-1, 3)
    z = pts_cam[:, 2]
    in_front = z > PROJECT_EPS
    safe_z = np.where(in_front, z, 1.0)
    u = K.fx * pts_cam[:, 0] / safe_z + K.cx
    v = K.fy * pts_cam[:, 1] / safe_z + K.cy
    return np.stack([u, v], axis=1), z, in_front


def pixel_index(K: CameraIntrinsics, uv: np.ndarray):
    """Nearest pixel (row, col) for each projection and an in-image flag"""
    cols = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    rows = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    inside = (cols >= 0) & (cols < K.width) & (rows >= 0) & (rows < K.height)
    return rows, cols, inside


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _readonly(pts))
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise GeometryError("intensity length differs from point count")
            object.__setattr__(self, "intensity", _readonly(inten))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def select(self, keep: np.ndarray) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[keep]
        return PointCloud(self.points[keep], inten)

    def transformed(self, pose: SE3Pose) -> "PointCloud":
        return PointCloud(se3_apply(pose, self.points), self.intensity)
