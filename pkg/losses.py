"""Hierarchical color / depth / semantic / feature losses and the residual map.

Masks passed to every loss mark pixels to EXCLUDE (dynamic = True).
"""

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from config import IGNORE_LABEL, LossWeights, UncertaintyWeights
from errors import EmptyPixelSet
from frames import FrameBundle
from rasterizer import DTYPE, RenderOutput

PROB_FLOOR = 1e-12
NORM_EPS = 1e-8


@dataclass
class LossParts:
    l_s: float = 0.0
    l_dino: float = 0.0
    l_c: float = 0.0
    l_depth: float = 0.0


@dataclass
class LossReport:
    l_c: float
    l_depth: float
    l_s: float
    l_dino: float
    total: float
    valid_pixel_count: int = 0
    semantic_detached: bool = True

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _included(mask, shape) -> torch.Tensor:
    if mask is None:
        return torch.ones(shape, dtype=torch.bool)
    m = torch.as_tensor(np.asarray(mask, dtype=bool))
    if tuple(m.shape) != tuple(shape):
        raise ValueError(f"mask shape {tuple(m.shape)} differs from image shape {tuple(shape)}")
    return ~m


def _require_pixels(incl: torch.Tensor, what: str):
    if not bool(incl.any()):
        raise EmptyPixelSet(f"no pixels left for the {what} loss")


def _color_term(color: torch.Tensor, gt_color, incl: torch.Tensor) -> torch.Tensor:
    diff = (color - _t(gt_color)).abs().mean(dim=-1)
    return diff[incl].mean()


def _depth_term(depth: torch.Tensor, gt_depth, incl: torch.Tensor) -> torch.Tensor:
    gt = _t(gt_depth)
    valid = incl & (gt > 0)
    if not bool(valid.any()):
        return torch.zeros((), dtype=DTYPE)
    return (depth - gt).abs()[valid].mean()


def _semantic_term(semantic_prob: torch.Tensor, gt_labels, incl: torch.Tensor) -> Optional[torch.Tensor]:
    labels = torch.as_tensor(np.asarray(gt_labels, dtype=np.int64))
    L = semantic_prob.shape[-1]
    valid = incl & (labels != IGNORE_LABEL) & (labels >= 0) & (labels < L)
    if not bool(valid.any()):
        return None
    p = semantic_prob[valid].gather(1, labels[valid][:, None])[:, 0]
    return -torch.log(torch.clamp(p, min=PROB_FLOOR)).mean()


def _cosine_distance(rendered: torch.Tensor, gt) -> torch.Tensor:
    """Per-pixel 1 - cos(F, F'); 1 where either vector is (near) zero"""
    f = _t(gt)
    nr = rendered.norm(dim=-1)
    nf = f.norm(dim=-1)
    ok = (nr >= NORM_EPS) & (nf >= NORM_EPS)
    denom = torch.where(ok, nr * nf, torch.ones_like(nr))
    cos = (rendered * f).sum(dim=-1) / denom
    return torch.where(ok, 1.0 - cos, torch.ones_like(cos))


def _dino_term(feature: torch.Tensor, gt_features, incl: torch.Tensor) -> torch.Tensor:
    return _cosine_distance(feature, gt_features)[incl].mean()


def color_depth_loss(render: RenderOutput, gt_color, gt_depth, mask=None) -> Tuple[float, float]:
    """Mean L1 color error and mean absolute depth error over unmasked pixels"""
    incl = _included(mask, render.shape)
    _require_pixels(incl, "color/depth")
    with torch.no_grad():
        return float(_color_term(render.color, gt_color, incl)), float(_depth_term(render.depth, gt_depth, incl))


def semantic_loss(render: RenderOutput, gt_labels, mask=None) -> float:
    """Cross-entropy of the rendered class distribution against one-hot labels"""
    incl = _included(mask, render.shape)
    _require_pixels(incl, "semantic")
    with torch.no_grad():
        term = _semantic_term(render.semantic_prob, gt_labels, incl)
    if term is None:
        raise EmptyPixelSet("every included pixel carries the ignore label")
    return float(term)


def dino_loss(render: RenderOutput, gt_features, mask=None) -> float:
    """Mean cosine distance between rendered and ingested feature maps"""
    incl = _included(mask, render.shape)
    _require_pixels(incl, "feature")
    with torch.no_grad():
        return float(_dino_term(render.feature, gt_features, incl))


def total_loss(parts: LossParts, weights: LossWeights, valid_pixel_count: int = 0) -> LossReport:
    total = (
        weights.lambda_s * parts.l_s
        + weights.lambda_dino * parts.l_dino
        + weights.lambda_c * parts.l_c
        + weights.lambda_depth * parts.l_depth
    )
    return LossReport(
        l_c=parts.l_c,
        l_depth=parts.l_depth,
        l_s=parts.l_s,
        l_dino=parts.l_dino,
        total=total,
        valid_pixel_count=valid_pixel_count,
        semantic_detached=True,
    )


def residual_map(render: RenderOutput, frame: FrameBundle, w: UncertaintyWeights) -> np.ndarray:
    """Per-pixel U = λ'_dino (1 - cos(F, F')) + λ'_depth |D - D_gt|"""
    with torch.no_grad():
        feat = _cosine_distance(render.feature, frame.features).numpy()
        depth = render.depth.numpy()
    gt = np.asarray(frame.dense_depth, dtype=np.float64)
    depth_err = np.where(gt > 0, np.abs(depth - gt), 0.0)
    return w.lambda_dino * feat + w.lambda_depth * depth_err


def evaluate_losses(
    render: RenderOutput,
    frame: FrameBundle,
    mask,
    weights: LossWeights,
    with_grads: bool = True,
) -> Tuple[LossReport, Dict[str, Optional[np.ndarray]]]:
    """Full weighted loss plus dLoss/dOutput maps for render_backward.

    Terms whose pixel set is empty (no valid depth, all labels ignored)
    contribute 0 and no gradient; an empty included set raises EmptyPixelSet.
    """
    incl = _included(mask, render.shape)
    _require_pixels(incl, "total")
    color = render.color.detach().clone().requires_grad_(with_grads)
    depth = render.depth.detach().clone().requires_grad_(with_grads)
    sem = render.semantic_prob.detach().clone().requires_grad_(with_grads)
    feat = render.feature.detach().clone().requires_grad_(with_grads)

    with torch.enable_grad():
        l_c = _color_term(color, frame.image, incl)
        l_depth = _depth_term(depth, frame.dense_depth, incl)
        l_s = _semantic_term(sem, frame.semantic_labels, incl)
        l_dino = _dino_term(feat, frame.features, incl)
        zero = torch.zeros((), dtype=DTYPE)
        l_s_val = l_s if l_s is not None else zero
        total = (
            weights.lambda_s * l_s_val
            + weights.lambda_dino * l_dino
            + weights.lambda_c * l_c
            + weights.lambda_depth * l_depth
        )

    grads: Dict[str, Optional[np.ndarray]] = {"color": None, "depth": None, "semantic_prob": None, "feature": None}
    if with_grads and total.requires_grad:
        keys = list(grads)
        got = torch.autograd.grad(total, [color, depth, sem, feat], allow_unused=True)
        for k, g in zip(keys, got):
            grads[k] = None if g is None else g.numpy()

    parts = LossParts(
        l_s=l_s_val.detach().item(),
        l_dino=l_dino.detach().item(),
        l_c=l_c.detach().item(),
        l_depth=l_depth.detach().item(),
    )
    return total_loss(parts, weights, int(incl.sum())), grads
