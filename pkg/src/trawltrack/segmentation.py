"""Single-frame fish segmentation.

Pipeline per frame: trawl-web removal, gradient-based candidate
localization, double local thresholding inside each candidate's
elliptical neighborhood, ratio-histogram backprojection to merge the two
masks, morphological smoothing, then area/variance filtering of the
surviving blobs.  Designed for bright targets on a darker, unevenly lit
background; a config flag inverts the frame for dark-target footage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .imaging import (
    Component,
    OrientedBox,
    UprightBox,
    antidiagonal_line,
    as_gray_frame,
    connected_components,
    diagonal_line,
    disk,
    masked_histogram,
    median3x3,
    morph,
    oriented_box_from_points,
    otsu_threshold,
    shifted_threshold,
)

logger = logging.getLogger(__name__)


@dataclass
class SegmentationConfig:
    """Tunable segmentation parameters (defaults follow the field-tuned set)."""

    p_low: float = 1.0
    p_high: float = 0.7
    theta_bp: float = 0.3
    theta_area_low: float = 2e3
    theta_area_high: float = 1e6
    theta_var: float = 30.0
    hist_bins: int = 16
    ellipse_scale: float = 1.5
    web_se_len: int = 7
    post_se_size: int = 7
    dark_targets: bool = False
    connectivity: int = 8

    def __post_init__(self):
        if not 0 <= self.p_high <= self.p_low:
            raise ValueError("expected 0 <= p_high <= p_low")
        if not 0 < self.theta_bp < 1:
            raise ValueError("theta_bp must lie in (0, 1)")
        if self.theta_area_low >= self.theta_area_high:
            raise ValueError("area bounds out of order")
        if self.theta_var < 0:
            raise ValueError("variance threshold must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "SegmentationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown segmentation keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LocalRegion:
    """Elliptical neighborhood of a candidate object.

    Center/axes/orientation in frame pixels; ``clip`` is the ellipse's
    frame-clamped bounding rectangle.
    """

    cx: float
    cy: float
    semi_major: float
    semi_minor: float
    angle: float
    clip: UprightBox

    def membership(self) -> np.ndarray:
        """Boolean ellipse-interior mask over the clip box."""
        ys, xs = np.mgrid[self.clip.y0 : self.clip.y1, self.clip.x0 : self.clip.x1]
        dx = xs - self.cx
        dy = ys - self.cy
        cos_a, sin_a = np.cos(self.angle), np.sin(self.angle)
        u = dx * cos_a + dy * sin_a
        v = -dx * sin_a + dy * cos_a
        return (u / self.semi_major) ** 2 + (v / self.semi_minor) ** 2 <= 1.0


@dataclass(frozen=True)
class Detection:
    """One segmented object in one view, all geometry in frame coordinates."""

    mask: np.ndarray  # bool, local to ``upright``
    upright: UprightBox
    oriented: OrientedBox
    centroid: tuple[float, float]
    area: int
    hist: np.ndarray
    mean_intensity: float
    variance: float

    def frame_mask(self, shape: tuple[int, int]) -> np.ndarray:
        """Expand the box-local mask to a full frame-size mask."""
        out = np.zeros(shape, dtype=bool)
        out[self.upright.slices()] = self.mask
        return out


def remove_trawl_web(frame: np.ndarray, web_se_len: int = 7) -> np.ndarray:
    """Suppress thin bright diagonal netting by two sequential openings.

    Opens with a main-diagonal line element, then with an anti-diagonal
    one; 1-pixel-wide grid lines of either orientation vanish while
    thicker bodies survive.
    """
    frame = as_gray_frame(frame)
    out = morph(frame, "open", diagonal_line(web_se_len))
    return morph(out, "open", antidiagonal_line(web_se_len))


def detect_candidates(frame: np.ndarray, config: SegmentationConfig) -> list[LocalRegion]:
    """Roughly locate objects via the morphological gradient.

    The gradient image is globally thresholded (unshifted), its connected
    components are boxed by PCA, and each box's inscribed ellipse is
    enlarged by ``ellipse_scale`` to form the local analysis region.
    """
    frame = as_gray_frame(frame)
    height, width = frame.shape
    grad = morph(frame, "gradient", disk(config.post_se_size))
    tau, degenerate = otsu_threshold(masked_histogram(grad, None, 256))
    if degenerate:
        return []
    mask = grad > tau
    regions: list[LocalRegion] = []
    for comp in connected_components(mask, config.connectivity):
        obox = oriented_box_from_points(comp.xs, comp.ys)
        a = max(obox.width / 2.0 * config.ellipse_scale, 1.0)
        b = max(obox.height / 2.0 * config.ellipse_scale, 1.0)
        cos_a, sin_a = np.cos(obox.angle), np.sin(obox.angle)
        ex = float(np.hypot(a * cos_a, b * sin_a))
        ey = float(np.hypot(a * sin_a, b * cos_a))
        clip = UprightBox(
            int(np.floor(obox.cx - ex)), int(np.floor(obox.cy - ey)),
            int(np.ceil(2 * ex)) + 1, int(np.ceil(2 * ey)) + 1,
        )
        try:
            clip = clip.clamped(width, height)
        except ValueError:
            continue
        regions.append(LocalRegion(obox.cx, obox.cy, a, b, obox.angle, clip))
    return regions


def double_local_threshold(
    frame: np.ndarray, region: LocalRegion, p_low: float, p_high: float
) -> tuple[np.ndarray, np.ndarray]:
    """Two shifted thresholds inside one elliptical region.

    Returns clip-box-local masks ``(m_low, m_high)``, each median-filtered.
    A degenerate (single-level) region yields two empty masks.
    """
    inside = region.membership()
    patch = frame[region.clip.slices()]
    hist = masked_histogram(patch, inside, 256)
    if hist.sum() == 0:
        return np.zeros_like(inside), np.zeros_like(inside)
    tau, degenerate = otsu_threshold(hist)
    if degenerate:
        return np.zeros_like(inside), np.zeros_like(inside)
    tau_low = shifted_threshold(hist, tau, p_low)
    tau_high = shifted_threshold(hist, tau, p_high)
    m_low = median3x3((patch > tau_low) & inside)
    m_high = median3x3((patch > tau_high) & inside)
    return m_low, m_high


def backproject_merge(
    frame: np.ndarray,
    region: LocalRegion,
    m_low: np.ndarray,
    m_high: np.ndarray,
    hist_bins: int = 16,
    theta_bp: float = 0.3,
) -> np.ndarray:
    """Merge the two local masks through their ratio histogram.

    The per-bin ratio min(H_high/H_low, 1) scores foreground confidence;
    it is backprojected onto the low mask's footprint and thresholded.
    The result is always a subset of ``m_low``.
    """
    if m_low.sum() == 0:
        return np.zeros_like(m_low)
    patch = frame[region.clip.slices()]
    h_low = masked_histogram(patch, m_low, hist_bins).astype(np.float64)
    h_high = masked_histogram(patch, m_high, hist_bins).astype(np.float64)
    ratio = np.zeros(hist_bins)
    occupied = h_low > 0
    ratio[occupied] = np.minimum(h_high[occupied] / h_low[occupied], 1.0)
    back = ratio[patch.astype(np.int64) * hist_bins // 256]
    return (back > theta_bp) & m_low


def filter_area_variance(
    frame: np.ndarray, mask: np.ndarray, config: SegmentationConfig
) -> list[Detection]:
    """Keep blobs within the area bounds whose pixel variance is large enough.

    Variance uses the unbiased divisor (area - 1), so one-pixel blobs are
    discarded outright.  Survivors become full ``Detection`` records.
    """
    detections: list[Detection] = []
    for comp in connected_components(mask, config.connectivity):
        if not config.theta_area_low <= comp.area <= config.theta_area_high:
            continue
        if comp.area < 2:
            continue
        values = frame[comp.ys, comp.xs].astype(np.float64)
        mean = float(values.mean())
        variance = float(((values - mean) ** 2).sum() / (comp.area - 1))
        if variance < config.theta_var:
            continue
        detections.append(_build_detection(frame, comp, mean, variance, config.hist_bins))
    return detections


def _build_detection(
    frame: np.ndarray, comp: Component, mean: float, variance: float, hist_bins: int
) -> Detection:
    box = comp.box
    local = np.zeros((box.h, box.w), dtype=bool)
    local[comp.ys - box.y0, comp.xs - box.x0] = True
    hist = np.bincount(
        frame[comp.ys, comp.xs].astype(np.int64) * hist_bins // 256, minlength=hist_bins
    ).astype(np.int64)
    return Detection(
        mask=local,
        upright=box,
        oriented=oriented_box_from_points(comp.xs, comp.ys),
        centroid=(float(comp.xs.mean()), float(comp.ys.mean())),
        area=comp.area,
        hist=hist,
        mean_intensity=mean,
        variance=variance,
    )


def segment_frame(frame: np.ndarray, config: SegmentationConfig | None = None) -> list[Detection]:
    """Segment one grayscale frame into a list of detections.

    Deterministic; an empty list is a valid result.  Detections are
    ordered by connected-component labeling (top-left first).
    """
    config = config or SegmentationConfig()
    frame = as_gray_frame(frame)
    if config.dark_targets:
        frame = (255 - frame.astype(np.int16)).astype(np.uint8)
    clean = remove_trawl_web(frame, config.web_se_len)
    regions = detect_candidates(clean, config)
    if not regions:
        return []
    union = np.zeros(frame.shape, dtype=bool)
    for region in regions:
        m_low, m_high = double_local_threshold(clean, region, config.p_low, config.p_high)
        merged = backproject_merge(
            clean, region, m_low, m_high, config.hist_bins, config.theta_bp
        )
        union[region.clip.slices()] |= merged
    se = disk(config.post_se_size)
    union = morph(morph(union, "close", se), "open", se)
    detections = filter_area_variance(clean, union, config)
    logger.debug("segment_frame: %d regions -> %d detections", len(regions), len(detections))
    return detections
