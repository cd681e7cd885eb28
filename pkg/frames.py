from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import DimensionMismatch
from geometry import CameraIntrinsics, PointCloud, SE3Pose


@dataclass
class FrameBundle:
    """One timestep of ingested sensor data and precomputed assets"""

    index: int
    image: np.ndarray  # H×W×3 float64 in [0, 1]
    scan: PointCloud  # LiDAR frame
    dense_depth: np.ndarray  # H×W meters, 0 = invalid
    semantic_labels: np.ndarray  # H×W uint8 class ids, 255 = ignore
    features: np.ndarray  # H×W×N_d
    explicit_mask: np.ndarray  # H×W bool, True = dynamic
    timestamp: float = 0.0
    gt_pose: Optional[SE3Pose] = None
    motion_mask: Optional[np.ndarray] = None  # ground truth, fixtures only
    source: str = ""

    @property
    def shape(self):
        return self.image.shape[:2]

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[2])

    def validate(self, K: CameraIntrinsics, feature_dim: Optional[int] = None):
        """Check every raster asset against the camera size"""
        hw = K.shape
        checks = {
            "image": self.image.shape[:2] if self.image.ndim == 3 and self.image.shape[2] == 3 else None,
            "dense_depth": self.dense_depth.shape if self.dense_depth.ndim == 2 else None,
            "semantic_labels": self.semantic_labels.shape if self.semantic_labels.ndim == 2 else None,
            "features": self.features.shape[:2] if self.features.ndim == 3 else None,
            "explicit_mask": self.explicit_mask.shape if self.explicit_mask.ndim == 2 else None,
        }
        for name, got in checks.items():
            if got != hw:
                raise DimensionMismatch(
                    f"frame {self.index}: {name} has shape {getattr(self, name).shape}, expected {hw}",
                    self.source or None,
                )
        if feature_dim is not None and self.feature_dim != feature_dim:
            raise DimensionMismatch(
                f"frame {self.index}: feature dimension {self.feature_dim}, expected {feature_dim}",
                self.source or None,
            )
        if len(self.scan) == 0:
            raise DimensionMismatch(f"frame {self.index}: empty LiDAR scan", self.source or None)
