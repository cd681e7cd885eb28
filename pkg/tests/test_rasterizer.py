import numpy as np
import pytest

import config
from conftest import random_gaussians
from errors import StateMismatch
from gaussian_map import GaussianSet
from geometry import CameraIntrinsics, SE3Pose, se3_apply, se3_compose, se3_exp
from rasterizer import OUTPUT_KEYS, project_gaussian, render, render_backward, render_numpy, render_reference


def single(position, scale=0.1, opacity_logit=10.0, color=(0.2, 0.4, 0.6), rotation=(1.0, 0.0, 0.0, 0.0)):
    return GaussianSet(
        np.array([position], dtype=float),
        np.log(np.full((1, 3), scale)),
        np.array([rotation], dtype=float),
        np.array([opacity_logit]),
        np.array([color], dtype=float),
        np.array([[2.0, 0.0, -1.0]]),
        np.array([[1.0, 0.0, 0.0, 0.0]]),
    )


def test_empty_set_renders_black(small_camera):
    out = render_numpy(GaussianSet.empty(3, 4), SE3Pose.identity(), small_camera)
    for key in ("color", "depth", "alpha", "feature"):
        assert not out[key].any()
    np.testing.assert_allclose(out["semantic_prob"], 1.0 / 3.0)


def test_opaque_gaussian_on_pixel_center():
    K = CameraIntrinsics(50.0, 50.0, 8.0, 6.0, 17, 13)
    g = single([0.0, 0.0, 4.0])
    out = render_numpy(g, SE3Pose.identity(), K)
    # one contributor at the capped opacity
    np.testing.assert_allclose(out["color"][6, 8], config.ALPHA_MAX * g.colors[0], atol=1e-9)
    assert abs(out["depth"][6, 8] - 4.0) < 1e-6
    assert abs(out["alpha"][6, 8] - config.ALPHA_MAX) < 1e-9


def test_project_gaussian_closed_form():
    K = CameraIntrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)
    s, z = 0.2, 4.0
    g = single([0.0, 0.0, z], scale=s)[0]
    proj = project_gaussian(g, SE3Pose.identity(), K)
    expected = (100.0 * s / z) ** 2 + config.LOW_PASS
    np.testing.assert_allclose(proj.cov2d, np.diag([expected, expected]), atol=1e-12)
    np.testing.assert_allclose(proj.mean2d, [32.0, 32.0])
    assert proj.depth == pytest.approx(z)

    q = np.array([0.3, -0.5, 0.7, 0.4])
    rotated = single([0.0, 0.0, z], scale=s, rotation=q / np.linalg.norm(q))[0]
    np.testing.assert_allclose(project_gaussian(rotated, SE3Pose.identity(), K).cov2d, proj.cov2d, atol=1e-12)


def test_project_gaussian_culls():
    K = CameraIntrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)
    assert project_gaussian(single([0.0, 0.0, -2.0])[0], SE3Pose.identity(), K) is None
    assert project_gaussian(single([0.0, 0.0, 0.1])[0], SE3Pose.identity(), K) is None
    assert project_gaussian(single([50.0, 0.0, 2.0])[0], SE3Pose.identity(), K) is None
    # camera moved behind the Gaussian
    away = SE3Pose(translation=np.array([0.0, 0.0, 10.0]))
    assert project_gaussian(single([0.0, 0.0, 4.0])[0], away, K) is None


def random_scene(rng):
    W, H = int(rng.integers(8, 65)), int(rng.integers(8, 65))
    f = rng.uniform(20.0, 80.0)
    K = CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), (W - 1) / 2.0, (H - 1) / 2.0, W, H)
    gs = random_gaussians(rng, int(rng.integers(0, 101)), spread=1.5)
    pose = SE3Pose.from_rotvec(rng.normal(scale=0.05, size=3), rng.normal(scale=0.2, size=3))
    gs.positions = se3_apply(pose, gs.positions)
    return gs, pose, K


def test_tiled_matches_reference():
    rng = np.random.default_rng(42)
    for _ in range(20):
        gs, pose, K = random_scene(rng)
        tiled = render(gs, pose, K, requires_grad=False)
        naive = render_reference(gs, pose, K)
        for key in OUTPUT_KEYS:
            assert np.max(np.abs(tiled.numpy(key) - naive.numpy(key)), initial=0.0) <= 1e-6, key


def test_render_output_invariants():
    rng = np.random.default_rng(5)
    for _ in range(5):
        gs, pose, K = random_scene(rng)
        out = render_numpy(gs, pose, K)
        assert out["alpha"].min() >= 0.0 and out["alpha"].max() <= 1.0
        assert out["depth"].min() >= 0.0
        covered = out["alpha"] > 1e-3
        np.testing.assert_allclose(out["semantic_prob"].sum(axis=-1)[covered], 1.0, atol=1e-5)


def test_permutation_invariance(small_camera):
    rng = np.random.default_rng(9)
    gs = random_gaussians(rng, 40)
    perm = rng.permutation(40)
    a = render_numpy(gs, SE3Pose.identity(), small_camera)
    b = render_numpy(gs.select(perm), SE3Pose.identity(), small_camera)
    for key in OUTPUT_KEYS:
        np.testing.assert_allclose(a[key], b[key], atol=1e-12)


def test_alpha_monotone_in_opacity(small_camera):
    rng = np.random.default_rng(13)
    gs = random_gaussians(rng, 8)
    gs.opacity_logits = rng.uniform(-3.0, 0.0, size=8)
    base = render_numpy(gs, SE3Pose.identity(), small_camera)["alpha"]
    for i in range(8):
        more = gs.copy()
        more.opacity_logits[i] += 1.5
        alpha = render_numpy(more, SE3Pose.identity(), small_camera)["alpha"]
        assert np.all(alpha >= base - 1e-12)


def _random_grad_maps(rng, out):
    return {key: rng.normal(size=out.numpy(key).shape) for key in OUTPUT_KEYS}


def test_zero_upstream_gives_zero_grads(small_camera):
    rng = np.random.default_rng(2)
    out = render(random_gaussians(rng, 10), SE3Pose.identity(), small_camera)
    zero = {key: np.zeros_like(out.numpy(key)) for key in OUTPUT_KEYS}
    grads = render_backward(out.ctx, zero)
    for block in list(grads.gaussian_blocks().values()) + [grads.pose]:
        assert not np.any(block)


def test_semantic_gradient_is_detached(small_camera):
    rng = np.random.default_rng(4)
    gs = random_gaussians(rng, 15)
    out = render(gs, SE3Pose.identity(), small_camera)
    sem = {"semantic_prob": rng.normal(size=out.numpy("semantic_prob").shape)}
    grads = render_backward(out.ctx, sem, detach_semantic_weights=True)
    for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors", "features"):
        assert np.all(getattr(grads, name) == 0.0), name
    assert np.all(grads.pose == 0.0)
    assert np.any(grads.semantic_logits != 0.0)

    attached = render_backward(out.ctx, sem, detach_semantic_weights=False)
    assert np.any(attached.positions != 0.0)


def test_backward_state_checks(small_camera):
    rng = np.random.default_rng(6)
    gs = random_gaussians(rng, 5)
    with pytest.raises(StateMismatch):
        render_backward(render(gs, SE3Pose.identity(), small_camera, requires_grad=False).ctx, {})
    out = render(gs, SE3Pose.identity(), small_camera)
    with pytest.raises(StateMismatch):
        render_backward(out.ctx, {"color": np.zeros((2, 2, 3))})
    with pytest.raises(StateMismatch):
        render_backward(out.ctx, {"normals": np.zeros((24, 32, 3))})


def gradcheck_scene(rng, K, n=6):
    """Large, soft, depth-separated splats so no cut-off is crossed under small perturbations"""
    H, W = K.shape
    z = 2.0 + 0.45 * np.arange(n) + rng.uniform(0.0, 0.1, n)
    u, v = rng.uniform(4, W - 4, n), rng.uniform(4, H - 4, n)
    cam = np.column_stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
    q = rng.normal(size=(n, 4))
    pose = SE3Pose.from_rotvec(rng.normal(scale=0.02, size=3), rng.normal(scale=0.05, size=3))
    gs = GaussianSet(
        se3_apply(pose, cam),
        rng.uniform(np.log(2.0), np.log(3.0), size=(n, 3)),
        q / np.linalg.norm(q, axis=1, keepdims=True),
        rng.uniform(-1.0, 0.2, size=n),
        rng.uniform(0.0, 1.0, size=(n, 3)),
        rng.normal(size=(n, 3)),
        rng.normal(size=(n, 4)),
    )
    return gs, pose


def _objective(gs, pose, K, weights):
    out = render_numpy(gs, pose, K)
    return sum(float(np.sum(weights[k] * out[k])) for k in OUTPUT_KEYS)


def _close(analytic, numeric):
    return abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-6


def _check_gradients(gs, pose, K, rng, h, tag):
    out = render(gs, pose, K)
    weights = _random_grad_maps(rng, out)
    grads = render_backward(out.ctx, weights, detach_semantic_weights=False)

    for name in GaussianSet.ATTRIBUTES:
        analytic = getattr(grads, name)
        for idx in np.ndindex(analytic.shape):
            plus, minus = gs.copy(), gs.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            numeric = (_objective(plus, pose, K, weights) - _objective(minus, pose, K, weights)) / (2 * h)
            assert _close(analytic[idx], numeric), (tag, name, idx, analytic[idx], numeric)

    for i in range(6):
        step = np.zeros(6)
        step[i] = h
        numeric = (
            _objective(gs, se3_compose(pose, se3_exp(step)), K, weights)
            - _objective(gs, se3_compose(pose, se3_exp(-step)), K, weights)
        ) / (2 * h)
        assert _close(grads.pose[i], numeric), (tag, "pose", i, grads.pose[i], numeric)


def _gradcheck(seed, K, h=1e-4):
    rng = np.random.default_rng(seed)
    gs, pose = gradcheck_scene(rng, K)
    _check_gradients(gs, pose, K, rng, h, seed)


def cutoff_margins(gs, pose, K):
    """Distances of a scene from every hard cut-off of the compositor.

    Returns the smallest |log(alpha / ALPHA_MIN)| over all splat-pixel pairs,
    the smallest |log(T / TRANSMITTANCE_MIN)| over the running
    transmittances and the smallest gap between splat depths.
    """
    proj = [project_gaussian(g, pose, K) for g in gs]
    if any(p is None for p in proj):
        return 0.0, 0.0, 0.0
    order = np.argsort([p.depth for p in proj], kind="stable")
    proj = [proj[i] for i in order]
    opacity = gs.opacities[order]
    rows, cols = np.divmod(np.arange(K.height * K.width), K.width)
    raw = np.empty((rows.size, len(proj)))
    for j, p in enumerate(proj):
        d = np.stack([cols - p.mean2d[0], rows - p.mean2d[1]], axis=1)
        power = -0.5 * np.einsum("ni,ij,nj->n", d, np.linalg.inv(p.cov2d), d)
        raw[:, j] = opacity[j] * np.exp(power)
    alpha = np.where(raw >= config.ALPHA_MIN, np.minimum(raw, config.ALPHA_MAX), 0.0)
    T = np.cumprod(1.0 - alpha, axis=1)
    with np.errstate(divide="ignore"):
        alpha_gap = np.min(np.abs(np.log(raw / config.ALPHA_MIN)))
        t_gap = np.min(np.abs(np.log(T / config.TRANSMITTANCE_MIN)))
    depth_gap = float(np.min(np.diff([p.depth for p in proj]))) if len(proj) > 1 else np.inf
    return float(alpha_gap), float(t_gap), depth_gap


def random_gradcheck_scene(rng, K, max_draws=2000):
    """Random scene of 10 to 30 Gaussians, redrawn until it sits clear of every cut-off"""
    H, W = K.shape
    for _ in range(max_draws):
        n = int(rng.integers(10, 31))
        z = rng.uniform(1.5, 6.0, n)
        u, v = rng.uniform(2, W - 2, n), rng.uniform(2, H - 2, n)
        cam = np.column_stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
        q = rng.normal(size=(n, 4))
        pose = SE3Pose.from_rotvec(rng.normal(scale=0.02, size=3), rng.normal(scale=0.05, size=3))
        gs = GaussianSet(
            se3_apply(pose, cam),
            rng.uniform(np.log(0.02), np.log(0.12), size=(n, 3)),
            q / np.linalg.norm(q, axis=1, keepdims=True),
            # opacity below ALPHA_MAX, so the upper clamp never engages
            rng.uniform(-2.0, 2.9, size=n),
            rng.uniform(0.0, 1.0, size=(n, 3)),
            rng.normal(size=(n, 3)),
            rng.normal(size=(n, 4)),
        )
        alpha_gap, t_gap, depth_gap = cutoff_margins(gs, pose, K)
        if alpha_gap > 5e-3 and t_gap > 5e-2 and depth_gap > 1e-3:
            return gs, pose
    raise AssertionError("no scene clear of the cut-offs")


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(small_camera, seed):
    _gradcheck(seed, small_camera)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(2, 22))
def test_gradients_match_finite_differences_many_seeds(small_camera, seed):
    _gradcheck(seed, small_camera)



def test_gradients_match_finite_differences_random_scene(small_camera):
    rng = np.random.default_rng(7)
    gs, pose = random_gradcheck_scene(rng, small_camera)
    assert 10 <= len(gs) <= 30
    _check_gradients(gs, pose, small_camera, rng, 1e-5, "random")
