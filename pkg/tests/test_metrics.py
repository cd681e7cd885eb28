import math

import numpy as np
import pytest

from errors import DegenerateTrajectory, EmptyPixelSet, LengthMismatch, ShapeMismatch, TooSmall
from geometry import SE3Pose, se3_compose
from metrics import align_umeyama, ate_rmse, psnr, ssim


def random_trajectory(rng, n=50):
    steps = rng.normal(scale=0.5, size=(n, 3)).cumsum(axis=0)
    return [SE3Pose.from_rotvec(rng.normal(scale=0.3, size=3), t) for t in steps]


def test_ate_identical_is_zero(rng):
    traj = random_trajectory(rng)
    assert ate_rmse(traj, traj).rmse < 1e-12


def test_ate_removes_rigid_offset(rng):
    ref = random_trajectory(rng)
    G = SE3Pose.from_rotvec([0.4, -0.2, 1.1], [10.0, -3.0, 2.0])
    est = [se3_compose(G, p) for p in ref]
    result = ate_rmse(est, ref)
    assert result.rmse < 1e-9
    assert result.scale == 1.0
    assert len(result.errors) == len(ref)


def test_ate_without_alignment():
    square = [np.array(t, dtype=float) for t in ([0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0])]
    ref = [SE3Pose(translation=t) for t in square]
    est = [SE3Pose(translation=t + [0.0, 0.0, 0.1]) for t in square]
    assert ate_rmse(est, ref, align=False).rmse == pytest.approx(0.1, abs=1e-12)
    assert ate_rmse(est, ref).rmse < 1e-12


def test_ate_with_scale(rng):
    ref = random_trajectory(rng)
    est = [SE3Pose(p.rotation, 0.5 * p.translation + 3.0) for p in ref]
    assert ate_rmse(est, ref).rmse > 1e-3
    scaled = ate_rmse(est, ref, with_scale=True)
    assert scaled.rmse < 1e-9
    assert scaled.scale == pytest.approx(2.0)


def test_ate_errors(rng):
    traj = random_trajectory(rng, 5)
    with pytest.raises(LengthMismatch):
        ate_rmse(traj, traj[:4])
    with pytest.raises(DegenerateTrajectory):
        ate_rmse(traj[:1], traj[:1])
    still = [SE3Pose.identity()] * 3
    with pytest.raises(DegenerateTrajectory):
        ate_rmse(still, still)


def test_umeyama_recovers_rotation(rng):
    model = rng.normal(size=(30, 3))
    R = SE3Pose.from_rotvec([0.3, 0.2, -0.9]).matrix()[:3, :3]
    data = model @ R.T + [1.0, 2.0, 3.0]
    R_hat, t_hat, s = align_umeyama(model, data)
    np.testing.assert_allclose(R_hat, R, atol=1e-9)
    np.testing.assert_allclose(t_hat, [1.0, 2.0, 3.0], atol=1e-9)
    assert s == 1.0


def test_psnr_examples(rng):
    img = rng.uniform(size=(8, 9, 3))
    assert psnr(img, img) == math.inf
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0)
    noisy = np.clip(img + rng.normal(scale=0.05, size=img.shape), 0, 1)
    assert psnr(img, noisy) == psnr(noisy, img)
    noisier = np.clip(img + rng.normal(scale=0.2, size=img.shape), 0, 1)
    assert psnr(img, noisier) < psnr(img, noisy)
    with pytest.raises(ShapeMismatch):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_over_valid_pixels(rng):
    img = rng.uniform(size=(6, 8, 3))
    other = img.copy()
    other[:2] = 1.0 - other[:2]
    valid = np.ones((6, 8), dtype=bool)
    valid[:2] = False
    assert psnr(img, other, valid) == math.inf
    assert psnr(img, other) == pytest.approx(psnr(img, other, ~valid) + 10.0 * math.log10(3.0))
    with pytest.raises(EmptyPixelSet):
        psnr(img, other, np.zeros((6, 8), dtype=bool))
    with pytest.raises(ShapeMismatch):
        psnr(img, other, valid[:5])


def test_ssim_examples(rng):
    img = rng.uniform(size=(24, 20, 3))
    assert ssim(img, img) == pytest.approx(1.0)
    gray = rng.uniform(size=(20, 20))
    assert ssim(gray, 1.0 - gray) < 0.0
    assert ssim(gray, gray * 0.9) < 1.0
    with pytest.raises(TooSmall):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((20, 20)), np.zeros((20, 21)))


def _window():
    ax = np.arange(-5, 6)
    g = np.exp(-(ax**2) / (2 * 1.5**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_oracle(x, y):
    """Direct windowed sums over every fully contained 11×11 window"""
    w = _window()
    c1, c2 = 0.01**2, 0.03**2
    H, W = x.shape
    vals = []
    for i in range(H - 10):
        for j in range(W - 10):
            px, py = x[i : i + 11, j : j + 11], y[i : i + 11, j : j + 11]
            mx, my = np.sum(w * px), np.sum(w * py)
            vx = np.sum(w * px * px) - mx * mx
            vy = np.sum(w * py * py) - my * my
            cxy = np.sum(w * px * py) - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_direct_windows(rng):
    for _ in range(3):
        x = rng.uniform(size=(32, 32))
        y = np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1)
        assert abs(ssim(x, y) - ssim_oracle(x, y)) < 1e-6
