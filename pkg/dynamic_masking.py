"""Explicit-implicit dynamic masking.

The implicit mask thresholds the per-pixel render residual at kappa times a
robust scale fitted over the whole image; the refined mask is its
intersection with the ingested segmentation mask. 1 / True means dynamic.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from config import MaskingParams
from errors import ShapeMismatch
from frames import FrameBundle
from geometry import CameraIntrinsics, PointCloud, SE3Pose, pixel_index, project_points, se3_apply
from losses import residual_map
from rasterizer import RenderOutput

SIGMA_FLOOR = 1e-6


def sigma_grid(params: MaskingParams) -> np.ndarray:
    grid = np.geomspace(params.sigma_min, params.sigma_max, params.sigma_steps)
    return np.maximum(grid, max(params.sigma_min, SIGMA_FLOOR))


def geman_mcclure(u: np.ndarray, sigma: float) -> np.ndarray:
    u2 = np.square(u)
    return u2 / (u2 + sigma * sigma)


def scale_objective(U: np.ndarray, grid: np.ndarray, rho: str = "geman_mcclure") -> np.ndarray:
    """Objective value for every sigma in grid.

    geman_mcclure: mean(log(sigma² + U²)) - log(sigma); its stationary point is
    where the mean Geman-McClure value equals 1/2, and it scales with U.
    geman_mcclure_mean: the raw mean Geman-McClure value.
    """
    u2 = np.square(np.asarray(U, dtype=np.float64).ravel())[None, :]
    s2 = np.square(grid)[:, None]
    if rho == "geman_mcclure_mean":
        return np.mean(u2 / (u2 + s2), axis=1)
    return np.mean(np.log(s2 + u2), axis=1) - np.log(grid)


def fit_sigma(U: np.ndarray, params: MaskingParams) -> float:
    """Grid-search the robust scale of the residual map; ties go to the smaller sigma"""
    grid = sigma_grid(params)
    obj = scale_objective(U, grid, params.rho)
    best = int(np.argmin(obj))
    return float(grid[best])


def _structure(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius == 0 or not mask.any():
        return mask
    return ndimage.binary_dilation(mask, structure=_structure(radius))


def threshold_residual(U: np.ndarray, sigma: float, kappa: float) -> np.ndarray:
    return np.asarray(U) > kappa * sigma


def implicit_mask(U: np.ndarray, sigma: float, params: MaskingParams) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    raw = threshold_residual(U, sigma, params.kappa)
    if params.morph_open_radius == 0:
        return raw
    return ndimage.binary_opening(raw, structure=_structure(params.morph_open_radius))


def fuse_masks(explicit: np.ndarray, implicit: np.ndarray) -> np.ndarray:
    explicit = np.asarray(explicit, dtype=bool)
    implicit = np.asarray(implicit, dtype=bool)
    if explicit.shape != implicit.shape:
        raise ShapeMismatch(f"explicit mask {explicit.shape} vs implicit mask {implicit.shape}")
    return explicit & implicit


@dataclass
class MaskSet:
    explicit: np.ndarray
    implicit: np.ndarray
    refined: np.ndarray = field(init=False)
    sigma: Optional[float] = None

    def __post_init__(self):
        self.explicit = np.asarray(self.explicit, dtype=bool)
        self.implicit = np.asarray(self.implicit, dtype=bool)
        self.refined = fuse_masks(self.explicit, self.implicit)


def compute_masks(
    render: Optional[RenderOutput],
    frame: FrameBundle,
    params: MaskingParams,
) -> MaskSet:
    """Residual -> sigma -> implicit mask -> fusion for one frame.

    Without a render (bootstrap) the explicit mask is used alone; with masking
    disabled every pixel is static.
    """
    explicit = np.asarray(frame.explicit_mask, dtype=bool)
    if not params.enabled:
        zeros = np.zeros_like(explicit)
        return MaskSet(zeros, zeros)
    if render is None:
        return MaskSet(explicit, np.ones_like(explicit))
    U = residual_map(render, frame, params.uncertainty)
    sigma = fit_sigma(U, params)
    return MaskSet(explicit, implicit_mask(U, sigma, params), sigma=sigma)


def lift_mask_to_points(mask: np.ndarray, scan: PointCloud, pose: SE3Pose, K: CameraIntrinsics) -> np.ndarray:
    """Per-point static flags; pose maps scan points into the camera frame.

    Points outside the image or behind the camera are unobserved and static.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != K.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs camera {K.shape}")
    uv, _, in_front = project_points(K, se3_apply(pose, scan.points))
    rows, cols, inside = pixel_index(K, uv)
    seen = in_front & inside
    dynamic = np.zeros(len(scan), dtype=bool)
    dynamic[seen] = mask[rows[seen], cols[seen]]
    return ~dynamic


def mask_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    union = np.count_nonzero(pred | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & truth) / union
