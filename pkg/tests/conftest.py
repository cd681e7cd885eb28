import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from config import PipelineConfig  # noqa: E402
from frames import FrameBundle  # noqa: E402
from gaussian_map import GaussianSet  # noqa: E402
from geometry import CameraIntrinsics, PointCloud  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_camera():
    return CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)


def random_gaussians(rng, n, num_classes=3, feature_dim=4, depth=(2.0, 5.0), spread=1.0):
    """Gaussians scattered in front of an identity camera"""
    z = rng.uniform(*depth, size=n)
    xy = rng.uniform(-spread, spread, size=(n, 2)) * z[:, None] * 0.3
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        positions=np.column_stack([xy, z]),
        log_scales=np.log(rng.uniform(0.05, 0.3, size=(n, 3))),
        rotations=q,
        opacity_logits=rng.uniform(-1.0, 2.0, size=n),
        colors=rng.uniform(0.0, 1.0, size=(n, 3)),
        semantic_logits=rng.normal(size=(n, num_classes)),
        features=rng.normal(size=(n, feature_dim)),
    )


def make_frame(K, index=0, num_classes=3, feature_dim=4, rng=None, scan=None):
    rng = rng or np.random.default_rng(index)
    H, W = K.shape
    if scan is None:
        pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50), rng.uniform(2, 6, 50)])
        scan = PointCloud(pts)
    return FrameBundle(
        index=index,
        image=rng.uniform(0, 1, size=(H, W, 3)),
        scan=scan,
        dense_depth=rng.uniform(1, 5, size=(H, W)),
        semantic_labels=rng.integers(0, num_classes, size=(H, W)).astype(np.uint8),
        features=rng.normal(size=(H, W, feature_dim)),
        explicit_mask=np.zeros((H, W), dtype=bool),
    )


@pytest.fixture
def small_config():
    return PipelineConfig(num_classes=3, feature_dim=4, tracking_iterations=3, mapping_iterations=3)
