"""Trajectory and image-quality metrics: ATE-RMSE, PSNR, SSIM."""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from errors import DegenerateTrajectory, EmptyPixelSet, LengthMismatch, ShapeMismatch, TooSmall
from geometry import SE3Pose

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11×11 window
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEGENERATE_EPS = 1e-12


@dataclass
class AteResult:
    rmse: float
    errors: List[float] = field(default_factory=list)
    alignment: SE3Pose = field(default_factory=SE3Pose.identity)
    scale: float = 1.0


def align_umeyama(model: np.ndarray, data: np.ndarray, with_scale: bool = False) -> Tuple[np.ndarray, np.ndarray, float]:
    """Least-squares (R, t, s) with data ≈ s R model + t; points are (N, 3) rows"""
    mu_m = model.mean(axis=0)
    mu_d = data.mean(axis=0)
    m0 = model - mu_m
    d0 = data - mu_d
    var_m = float(np.mean(np.sum(m0 * m0, axis=1)))
    var_d = float(np.mean(np.sum(d0 * d0, axis=1)))
    if var_m < DEGENERATE_EPS or var_d < DEGENERATE_EPS:
        raise DegenerateTrajectory("all trajectory positions coincide")

    W = d0.T @ m0 / model.shape[0]
    U, d, Vh = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vh) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vh
    s = float(np.trace(np.diag(d) @ S) / var_m) if with_scale else 1.0
    t = mu_d - s * R @ mu_m
    return R, t, s


def ate_rmse(
    estimated: Sequence[SE3Pose],
    reference: Sequence[SE3Pose],
    with_scale: bool = False,
    align: bool = True,
) -> AteResult:
    """RMSE of translation residuals after aligning estimated onto reference"""
    if len(estimated) != len(reference):
        raise LengthMismatch(f"estimated has {len(estimated)} poses, reference has {len(reference)}")
    if len(estimated) < 2:
        raise DegenerateTrajectory(f"need at least 2 poses, got {len(estimated)}")
    est = np.stack([p.translation for p in estimated])
    ref = np.stack([p.translation for p in reference])

    if align:
        R, t, s = align_umeyama(est, ref, with_scale)
    else:
        R, t, s = np.eye(3), np.zeros(3), 1.0
    aligned = s * est @ R.T + t
    errors = np.linalg.norm(aligned - ref, axis=1)
    rmse = float(np.sqrt(np.mean(errors**2)))
    return AteResult(rmse, errors.tolist(), SE3Pose.from_rotation_translation(R, t), s)


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, valid: Optional[np.ndarray] = None) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when identical.

    valid, an H×W boolean image, restricts the mean to its True pixels.
    """
    a, b = _check_pair(a, b)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != a.shape[:2]:
            raise ShapeMismatch(f"valid mask {valid.shape} vs image {a.shape[:2]}")
        if not valid.any():
            raise EmptyPixelSet("no valid pixels to compare")
        a, b = a[valid], b[valid]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _blur(x: np.ndarray) -> np.ndarray:
    return gaussian_filter(x, SSIM_SIGMA, mode="constant", truncate=SSIM_RADIUS / SSIM_SIGMA)


def _ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    mu_x, mu_y = _blur(x), _blur(y)
    sxx = _blur(x * x) - mu_x**2
    syy = _blur(y * y) - mu_y**2
    sxy = _blur(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    r = SSIM_RADIUS
    # only windows lying fully inside the image
    return (num / den)[r:-r, r:-r]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM (11×11 Gaussian window, sigma 1.5) over valid windows and channels"""
    a, b = _check_pair(a, b)
    if a.ndim not in (2, 3):
        raise ShapeMismatch(f"expected H×W or H×W×C image, got shape {a.shape}")
    if min(a.shape[:2]) < 2 * SSIM_RADIUS + 1:
        raise TooSmall(f"SSIM needs images of at least {2 * SSIM_RADIUS + 1} pixels per side, got {a.shape[:2]}")
    if a.ndim == 2:
        return float(np.mean(_ssim_map(a, b)))
    return float(np.mean([np.mean(_ssim_map(a[..., c], b[..., c])) for c in range(a.shape[2])]))
