"""Shared builders for constructed detections and stereo observations."""

import numpy as np
import pytest

from trawltrack.imaging import UprightBox, oriented_box_from_points
from trawltrack.segmentation import Detection
from trawltrack.stereo import CalibrationParams, StereoObservation


def make_detection(cx, cy, w=20, h=10, hist_bin=4, area=None, hist=None):
    """Rectangular detection centered at (cx, cy) with a chosen histogram."""
    w, h = int(w), int(h)
    x0 = int(round(cx - (w - 1) / 2))
    y0 = int(round(cy - (h - 1) / 2))
    mask = np.ones((h, w), dtype=bool)
    area = int(area) if area is not None else w * h
    if hist is None:
        hist = np.zeros(16, dtype=np.int64)
        hist[hist_bin] = area
    ys, xs = np.nonzero(mask)
    return Detection(
        mask=mask,
        upright=UprightBox(x0, y0, w, h),
        oriented=oriented_box_from_points(xs + x0, ys + y0),
        centroid=(float(cx), float(cy)),
        area=area,
        hist=np.asarray(hist, dtype=np.int64),
        mean_intensity=100.0,
        variance=50.0,
    )


def make_obs(x, y, disparity=150.0, area=200, hist_bin=4, w=20, h=10, left_index=0, right_index=0):
    """Stereo observation whose right view sits at x - disparity."""
    left = make_detection(x, y, w=w, h=h, hist_bin=hist_bin, area=area)
    right = make_detection(x - disparity, y, w=w, h=h, hist_bin=hist_bin, area=area)
    return StereoObservation(
        left=left,
        right=right,
        left_index=left_index,
        right_index=right_index,
        disparity=float(disparity),
        block_sads=np.zeros(4),
        mu_sad=1.0,
        single_block=False,
    )


@pytest.fixture
def calib():
    return CalibrationParams(
        focal_px=1000.0, baseline_m=0.3, cx=600.0, cy=200.0, width=1200, height=400
    )
