import numpy as np
import pytest

from conftest import make_frame
from errors import DimensionMismatch
from geometry import PointCloud


def test_valid_frame_passes(small_camera):
    frame = make_frame(small_camera)
    frame.validate(small_camera, feature_dim=4)
    assert frame.shape == (24, 32)
    assert frame.feature_dim == 4


def test_mismatched_raster_is_named(small_camera):
    frame = make_frame(small_camera)
    frame.dense_depth = np.zeros((10, 10))
    with pytest.raises(DimensionMismatch, match="dense_depth"):
        frame.validate(small_camera)


def test_feature_dim_checked(small_camera):
    frame = make_frame(small_camera, feature_dim=5)
    with pytest.raises(DimensionMismatch, match="feature dimension"):
        frame.validate(small_camera, feature_dim=4)


def test_empty_scan_rejected(small_camera):
    frame = make_frame(small_camera, scan=PointCloud.empty())
    with pytest.raises(DimensionMismatch, match="empty LiDAR scan"):
        frame.validate(small_camera)
