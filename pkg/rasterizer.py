"""Differentiable tile-based Gaussian splatting on the CPU.

Forward rendering composites color, depth, semantic logits, features and
alpha front to back. Gradients come from reverse-mode autodiff through the
same float64 graph, so they are exact for every Gaussian attribute and for a
right-multiplied pose perturbation T_wc * Exp(xi), xi = (translation, rotation).
"""

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch

import config
from errors import StateMismatch
from gaussian_map import Gaussian, GaussianSet
from geometry import CameraIntrinsics, SE3Pose

DTYPE = torch.float64

OUTPUT_KEYS = ("color", "depth", "semantic_prob", "feature", "alpha")


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


@dataclass
class RenderContext:
    """Forward state retained for render_backward"""

    leaves: Dict[str, torch.Tensor]
    outputs: Dict[str, torch.Tensor]
    num_gaussians: int


@dataclass
class RenderOutput:
    color: torch.Tensor  # H×W×3
    depth: torch.Tensor  # H×W
    semantic_prob: torch.Tensor  # H×W×L
    feature: torch.Tensor  # H×W×N_d
    alpha: torch.Tensor  # H×W
    ctx: Optional[RenderContext] = None

    @property
    def shape(self):
        return tuple(self.alpha.shape)

    def numpy(self, name: str) -> np.ndarray:
        return getattr(self, name).detach().numpy().copy()

    def semantic_argmax(self) -> np.ndarray:
        return self.semantic_prob.detach().argmax(dim=-1).numpy().astype(np.uint8)


@dataclass
class RenderGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    semantic_logits: np.ndarray
    features: np.ndarray
    pose: np.ndarray  # (6,) se(3) tangent, translation first

    def gaussian_blocks(self) -> Dict[str, np.ndarray]:
        return {a: getattr(self, a) for a in GaussianSet.ATTRIBUTES}


def _hat(xi: torch.Tensor) -> torch.Tensor:
    rho, phi = xi[:3], xi[3:]
    zero = torch.zeros((), dtype=DTYPE)
    top = torch.stack(
        [
            torch.stack([zero, -phi[2], phi[1], rho[0]]),
            torch.stack([phi[2], zero, -phi[0], rho[1]]),
            torch.stack([-phi[1], phi[0], zero, rho[2]]),
        ]
    )
    return torch.cat([top, torch.zeros((1, 4), dtype=DTYPE)], dim=0)


def _world_to_camera(pose: SE3Pose, xi: Optional[torch.Tensor]) -> torch.Tensor:
    T_cw = torch.from_numpy(pose.inverse().matrix())
    if xi is None:
        return T_cw
    # (T_wc Exp(xi))^-1 = Exp(-xi) T_cw
    return torch.matrix_exp(-_hat(xi)) @ T_cw


def _quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=1, keepdim=True)
    w, x, y, z = q.unbind(1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=1,
    ).reshape(-1, 3, 3)


def _project(leaves: Dict[str, torch.Tensor], T_cw: torch.Tensor, K: CameraIntrinsics):
    """EWA projection of every Gaussian: (means2d, cov2d, depth)"""
    R = T_cw[:3, :3]
    p_cam = leaves["positions"] @ R.T + T_cw[:3, 3]
    x, y, z = p_cam.unbind(1)
    z_safe = torch.where(z > 1e-8, z, torch.ones_like(z))
    u = K.fx * x / z_safe + K.cx
    v = K.fy * y / z_safe + K.cy
    zeros = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([K.fx / z_safe, zeros, -K.fx * x / z_safe**2], dim=1),
            torch.stack([zeros, K.fy / z_safe, -K.fy * y / z_safe**2], dim=1),
        ],
        dim=1,
    )
    Rg = _quat_to_rotmat(leaves["rotations"])
    s2 = torch.exp(2.0 * leaves["log_scales"])
    sigma3d = (Rg * s2[:, None, :]) @ Rg.transpose(1, 2)
    M = J @ R
    cov2d = M @ sigma3d @ M.transpose(1, 2) + config.LOW_PASS * torch.eye(2, dtype=DTYPE)
    return torch.stack([u, v], dim=1), cov2d, z


def _culled(means: np.ndarray, cov: np.ndarray, depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Near-plane cull plus 99%-mass ellipse versus image rectangle"""
    ex = np.sqrt(np.maximum(config.MASS_99_CHI2 * cov[:, 0, 0], 0.0))
    ey = np.sqrt(np.maximum(config.MASS_99_CHI2 * cov[:, 1, 1], 0.0))
    off = (
        (means[:, 0] + ex < -0.5)
        | (means[:, 0] - ex > K.width - 0.5)
        | (means[:, 1] + ey < -0.5)
        | (means[:, 1] - ey > K.height - 0.5)
    )
    finite = np.isfinite(means).all(axis=1) & np.isfinite(cov).all(axis=(1, 2))
    return (depth < config.NEAR_PLANE) | off | ~finite


def project_gaussian(g: Gaussian, pose: SE3Pose, K: CameraIntrinsics) -> Optional[ProjectedGaussian]:
    """Splat footprint of a single Gaussian, or None when it is culled"""
    leaves = {
        "positions": torch.as_tensor(np.asarray(g.position, dtype=np.float64)[None]),
        "log_scales": torch.as_tensor(np.asarray(g.log_scale, dtype=np.float64)[None]),
        "rotations": torch.as_tensor(np.asarray(g.rotation, dtype=np.float64)[None]),
    }
    with torch.no_grad():
        means, cov, z = _project(leaves, _world_to_camera(pose, None), K)
    means, cov, z = means.numpy(), cov.numpy(), z.numpy()
    if _culled(means, cov, z, K)[0]:
        return None
    return ProjectedGaussian(means[0].copy(), cov[0].copy(), float(z[0]))


def _conics(cov: torch.Tensor) -> torch.Tensor:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=1)


def _composite(pix: torch.Tensor, means, conics, opacity, depth, colors, semantics, features):
    """Front-to-back compositing of pre-sorted splats for a block of pixels"""
    P, S = pix.shape[0], means.shape[0]
    if S == 0:
        zeros = lambda d: torch.zeros((P, d), dtype=DTYPE)  # noqa: E731
        return {
            "color": zeros(3),
            "feature": zeros(features.shape[1]),
            "semantic_logits": zeros(semantics.shape[1]),
            "semantic_logits_detached": zeros(semantics.shape[1]),
            "depth": torch.zeros(P, dtype=DTYPE),
            "alpha": torch.zeros(P, dtype=DTYPE),
        }
    dx = pix[:, None, 0] - means[None, :, 0]
    dy = pix[:, None, 1] - means[None, :, 1]
    power = -0.5 * (conics[None, :, 0] * dx * dx + 2.0 * conics[None, :, 1] * dx * dy + conics[None, :, 2] * dy * dy)
    alpha = torch.clamp(opacity[None, :] * torch.exp(power), max=config.ALPHA_MAX)
    alpha = torch.where(alpha >= config.ALPHA_MIN, alpha, torch.zeros_like(alpha))
    T_incl = torch.cumprod(1.0 - alpha, dim=1)
    T_excl = torch.cat([torch.ones((P, 1), dtype=DTYPE), T_incl[:, :-1]], dim=1)
    # the splat that would push transmittance under the cut-off ends compositing
    live = (T_incl.detach() >= config.TRANSMITTANCE_MIN).to(DTYPE)
    w = alpha * T_excl * live
    acc = w.sum(dim=1)
    has = acc > 0
    depth_sum = w @ depth
    return {
        "color": w @ colors,
        "feature": w @ features,
        "semantic_logits": w @ semantics,
        "semantic_logits_detached": w.detach() @ semantics,
        "depth": torch.where(has, depth_sum / torch.where(has, acc, torch.ones_like(acc)), torch.zeros_like(acc)),
        "alpha": acc,
    }


def _make_leaves(gaussians: GaussianSet, requires_grad: bool) -> Dict[str, torch.Tensor]:
    leaves = {}
    for name in GaussianSet.ATTRIBUTES:
        t = torch.tensor(getattr(gaussians, name), dtype=DTYPE)
        t.requires_grad_(requires_grad)
        leaves[name] = t
    xi = torch.zeros(6, dtype=DTYPE)
    xi.requires_grad_(requires_grad)
    leaves["pose"] = xi
    return leaves


def _pixel_grid(rows: np.ndarray, cols: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.stack([cols, rows], axis=1).astype(np.float64))


def _tile_overlaps(means: np.ndarray, cov: np.ndarray, opacity: np.ndarray, x0, x1, y0, y1) -> np.ndarray:
    """Splats whose alpha >= 1/255 region touches the pixel-center box [x0,x1]×[y0,y1]"""
    strong = opacity > config.ALPHA_MIN
    m2 = np.where(strong, 2.0 * np.log(np.maximum(opacity / config.ALPHA_MIN, 1.0)), 0.0)
    ex = np.sqrt(m2 * cov[:, 0, 0]) + 1e-6
    ey = np.sqrt(m2 * cov[:, 1, 1]) + 1e-6
    return (
        strong
        & (means[:, 0] + ex >= x0)
        & (means[:, 0] - ex <= x1)
        & (means[:, 1] + ey >= y0)
        & (means[:, 1] - ey <= y1)
    )


def _finish(pixel_values: Dict[str, torch.Tensor], K: CameraIntrinsics, leaves, num_gaussians: int, keep_ctx: bool) -> RenderOutput:
    H, W = K.height, K.width
    sem = torch.softmax(pixel_values["semantic_logits"], dim=-1)
    sem_det = torch.softmax(pixel_values["semantic_logits_detached"], dim=-1)
    outputs = {
        "color": pixel_values["color"].reshape(H, W, 3),
        "depth": pixel_values["depth"].reshape(H, W),
        "semantic_prob": sem.reshape(H, W, -1),
        "feature": pixel_values["feature"].reshape(H, W, -1),
        "alpha": pixel_values["alpha"].reshape(H, W),
    }
    ctx = None
    if keep_ctx:
        ctx = RenderContext(leaves, dict(outputs, semantic_prob_detached=sem_det.reshape(H, W, -1)), num_gaussians)
    return RenderOutput(ctx=ctx, **outputs)


def _render(gaussians: GaussianSet, pose: SE3Pose, K: CameraIntrinsics, tiled: bool, requires_grad: bool) -> RenderOutput:
    leaves = _make_leaves(gaussians, requires_grad)
    T_cw = _world_to_camera(pose, leaves["pose"] if requires_grad else None)
    means, cov, z = _project(leaves, T_cw, K)
    conics = _conics(cov)
    opacity = torch.sigmoid(leaves["opacity_logits"])

    means_np, cov_np, z_np = means.detach().numpy(), cov.detach().numpy(), z.detach().numpy()
    visible = np.nonzero(~_culled(means_np, cov_np, z_np, K))[0]
    # depth ascending, ties by original index
    order = visible[np.lexsort((visible, z_np[visible]))]
    attrs = (
        means,
        conics,
        opacity,
        z,
        leaves["colors"],
        leaves["semantic_logits"],
        leaves["features"],
    )

    def gather(idx: np.ndarray):
        t = torch.from_numpy(idx.astype(np.int64))
        return [a.index_select(0, t) for a in attrs]

    H, W = K.height, K.width
    if not tiled:
        rows, cols = np.divmod(np.arange(H * W), W)
        values = _composite(_pixel_grid(rows, cols), *gather(order))
        return _finish(values, K, leaves, len(gaussians), requires_grad)

    op_np = opacity.detach().numpy()
    ts = config.TILE_SIZE
    chunks: List[Dict[str, torch.Tensor]] = []
    pixel_order = []
    for ty in range(0, H, ts):
        for tx in range(0, W, ts):
            y1, x1 = min(ty + ts, H) - 1, min(tx + ts, W) - 1
            rr, cc = np.meshgrid(np.arange(ty, y1 + 1), np.arange(tx, x1 + 1), indexing="ij")
            rr, cc = rr.ravel(), cc.ravel()
            hit = _tile_overlaps(means_np[order], cov_np[order], op_np[order], tx, x1, ty, y1)
            chunks.append(_composite(_pixel_grid(rr, cc), *gather(order[hit])))
            pixel_order.append(rr * W + cc)
    inverse = torch.from_numpy(np.argsort(np.concatenate(pixel_order), kind="stable"))
    values = {k: torch.cat([c[k] for c in chunks], dim=0).index_select(0, inverse) for k in chunks[0]}
    return _finish(values, K, leaves, len(gaussians), requires_grad)


def render(gaussians: GaussianSet, pose: SE3Pose, K: CameraIntrinsics, requires_grad: bool = True) -> RenderOutput:
    """Tile-based forward render; keeps the autograd state when requires_grad"""
    if requires_grad:
        return _render(gaussians, pose, K, tiled=True, requires_grad=True)
    with torch.no_grad():
        return _render(gaussians, pose, K, tiled=True, requires_grad=False)


def render_reference(gaussians: GaussianSet, pose: SE3Pose, K: CameraIntrinsics) -> RenderOutput:
    """Naive renderer: every pixel against every visible Gaussian"""
    with torch.no_grad():
        return _render(gaussians, pose, K, tiled=False, requires_grad=False)


def render_backward(ctx: Optional[RenderContext], grad_maps: Dict[str, object], detach_semantic_weights: bool = True) -> RenderGrads:
    """Pull dLoss/dOutput maps back to Gaussian attributes and the pose tangent.

    With detach_semantic_weights the semantic channel only reaches
    semantic_logits; compositing weights see no semantic gradient.
    """
    if ctx is None:
        raise StateMismatch("render was run without retained state")
    outputs, grad_outputs = [], []
    for key, g in grad_maps.items():
        if key not in OUTPUT_KEYS:
            raise StateMismatch(f"unknown render channel {key!r}")
        if g is None:
            continue
        out = ctx.outputs["semantic_prob_detached" if key == "semantic_prob" and detach_semantic_weights else key]
        g = torch.as_tensor(np.asarray(g.detach() if isinstance(g, torch.Tensor) else g, dtype=np.float64))
        if tuple(g.shape) != tuple(out.shape):
            raise StateMismatch(f"gradient for {key} has shape {tuple(g.shape)}, render has {tuple(out.shape)}")
        if out.requires_grad:
            outputs.append(out)
            grad_outputs.append(g)

    names = list(GaussianSet.ATTRIBUTES) + ["pose"]
    inputs = [ctx.leaves[n] for n in names]
    if outputs:
        grads = torch.autograd.grad(outputs, inputs, grad_outputs, retain_graph=True, allow_unused=True)
    else:
        grads = [None] * len(inputs)
    arrays = {
        n: (torch.zeros_like(t) if g is None else g).detach().numpy().copy()
        for n, t, g in zip(names, inputs, grads)
    }
    return RenderGrads(**arrays)


def render_numpy(gaussians: GaussianSet, pose: SE3Pose, K: CameraIntrinsics) -> Dict[str, np.ndarray]:
    """Gradient-free render returned as numpy channels"""
    out = render(gaussians, pose, K, requires_grad=False)
    return {k: out.numpy(k) for k in OUTPUT_KEYS}
