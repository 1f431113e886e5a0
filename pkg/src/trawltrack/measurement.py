"""Body-end validation and 3-D length measurement.

Each end of a matched object is checked by comparing a square window at
the end of its oriented box against the disparity-displaced window in
the other view; an end whose per-pixel SAD blows up relative to the
object's own block-matching residual is treated as cropped (typically a
low-reflectivity tail) and recovered with a greedy active contour before
the 3-D length is triangulated from the refined disparities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import OrientedBox, UprightBox, disk, morph, oriented_box_from_points
from .stereo import CalibrationParams, DisparityPatch, StereoObservation, triangulate

logger = logging.getLogger(__name__)

END_LOW = "end_low"  # extreme of the major axis in the -axis direction
END_HIGH = "end_high"


@dataclass
class SnakeConfig:
    """Greedy active-contour parameters for tail recovery."""

    elasticity: float = 0.2
    curvature: float = 0.2
    gradient: float = 1.0
    iterations: int = 200
    points: int = 24
    search: int = 1  # half-size of the per-point move window
    smooth_sigma: float = 1.5
    # gradient windows spanning less than this fraction of the global
    # gradient range are damped, so the contour cannot ride shallow
    # slopes across the frame toward a distant strong edge
    grad_floor_frac: float = 0.05

    def __post_init__(self):
        if self.iterations < 1 or self.points < 8:
            raise ValueError("need iterations >= 1 and points >= 8")


@dataclass(frozen=True)
class EndRegion:
    """Square window anchored at one extreme of the oriented box."""

    window: UprightBox
    end: str  # END_LOW or END_HIGH
    center: tuple[float, float]
    clamped: bool


@dataclass(frozen=True)
class FrameLength:
    """One frame's 3-D length measurement."""

    head_3d: np.ndarray
    tail_3d: np.ndarray
    length_m: float
    flags: tuple[str, ...]


@dataclass
class LengthEstimate:
    """Per-track length: per-frame values and their median."""

    per_frame: list[float]
    reported: float
    flags: tuple[str, ...]


def end_regions(
    oriented: OrientedBox, frame_shape: tuple[int, int]
) -> tuple[EndRegion, EndRegion]:
    """The two h0 x h0 squares centered at the major-axis extremes.

    h0 is the oriented box height; windows straddling the frame edge are
    clamped and flagged.  Raises for boxes too small to compare.
    """
    h0 = int(round(oriented.height))
    if h0 < 4:
        raise ValueError(f"oriented box height {h0} too small for end regions")
    height, width = frame_shape
    low_pt, high_pt = oriented.end_points()
    out = []
    for pt, end in ((low_pt, END_LOW), (high_pt, END_HIGH)):
        x0 = int(round(pt[0] - h0 / 2))
        y0 = int(round(pt[1] - h0 / 2))
        raw = UprightBox(x0, y0, h0, h0)
        window = raw.clamped(width, height)
        clamped = (window.w, window.h) != (h0, h0)
        out.append(EndRegion(window=window, end=end, center=(float(pt[0]), float(pt[1])), clamped=clamped))
    return out[0], out[1]


def _window_sad(left_frame: np.ndarray, right_frame: np.ndarray, window: UprightBox, shift: int) -> float:
    """Per-pixel SAD between a left window and its disparity-shifted twin."""
    height, width = left_frame.shape
    rx0 = window.x0 - shift
    lx0, w = window.x0, window.w
    if rx0 < 0:
        lx0 -= rx0
        w += rx0
        rx0 = 0
    w = min(w, width - rx0, width - lx0)
    if w <= 0:
        return float("inf")
    rows = slice(window.y0, window.y1)
    lw = left_frame[rows, lx0 : lx0 + w].astype(np.int32)
    rw = right_frame[rows, rx0 : rx0 + w].astype(np.int32)
    return float(np.abs(lw - rw).mean())


def detect_mismatch(
    left_frame: np.ndarray,
    right_frame: np.ndarray,
    obs: StereoObservation,
    theta_sad: float = 16.0,
) -> frozenset[str]:
    """Ends whose cross-view SAD ratio exceeds ``theta_sad``.

    The reference is the mean of the object's own minimum block SADs; a
    zero reference (perfect match everywhere) reports no mismatch.
    Raising the threshold can only shrink the reported set.
    """
    if obs.mu_sad <= 0:
        return frozenset()
    shift = int(round(obs.disparity))
    try:
        ends = end_regions(obs.left.oriented, left_frame.shape)
    except ValueError:
        # an end window falls entirely outside the frame: nothing to validate
        return frozenset()
    flagged = set()
    for region in ends:
        sad = _window_sad(left_frame, right_frame, region.window, shift)
        if np.isfinite(sad) and sad / obs.mu_sad > theta_sad:
            flagged.add(region.end)
    return frozenset(flagged)


# ---------------------------------------------------------------------------
# Greedy snake
# ---------------------------------------------------------------------------


def _polygon_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _fill_polygon(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Even-odd scanline rasterization of a closed polygon."""
    mask = np.zeros(shape, dtype=bool)
    n = len(points)
    y_min = max(int(np.floor(points[:, 1].min())), 0)
    y_max = min(int(np.ceil(points[:, 1].max())), shape[0] - 1)
    for y in range(y_min, y_max + 1):
        yc = y + 0.5
        crossings = []
        for i in range(n):
            x1, y1 = points[i]
            x2, y2 = points[(i + 1) % n]
            if (y1 <= yc < y2) or (y2 <= yc < y1):
                crossings.append(x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
        crossings.sort()
        for a, b in zip(crossings[::2], crossings[1::2]):
            x0 = max(int(np.ceil(a - 0.5)), 0)
            x1 = min(int(np.floor(b - 0.5)), shape[1] - 1)
            if x1 >= x0:
                mask[y, x0 : x1 + 1] = True
    return mask


def _greedy_snake(points: np.ndarray, grad_mag: np.ndarray, cfg: SnakeConfig) -> np.ndarray:
    """Point-wise greedy energy descent of a closed contour.

    Per iteration every point examines its move window and takes the
    position minimizing elasticity (spacing regularity), curvature and
    negative gradient magnitude, each min-max normalized per window.
    All points update simultaneously (vectorized across the contour).
    """
    height, width = grad_mag.shape
    pts = points.astype(np.float64).copy()
    span = np.arange(-cfg.search, cfg.search + 1, dtype=np.float64)
    offs = np.stack(np.meshgrid(span, span, indexing="xy"), axis=-1).reshape(-1, 2)
    order = np.lexsort((offs[:, 1], offs[:, 0], np.any(offs != 0, axis=1)))
    offs = offs[order]  # staying put sorts first, so it wins energy ties
    grad_floor = cfg.grad_floor_frac * float(grad_mag.max())
    # reference spacing is fixed at the initial contour's: recomputing it per
    # iteration lets the whole contour drain onto one strong edge
    mean_spacing = float(np.mean(np.linalg.norm(pts - np.roll(pts, 1, axis=0), axis=1)))

    def norm_rows(term):
        lo = term.min(axis=1, keepdims=True)
        width_ = term.max(axis=1, keepdims=True) - lo
        return np.where(width_ > 0, (term - lo) / np.where(width_ > 0, width_, 1.0), 0.0)

    for _ in range(cfg.iterations):
        prev_pts = np.roll(pts, 1, axis=0)
        next_pts = np.roll(pts, -1, axis=0)
        cands = pts[:, None, :] + offs[None, :, :]
        cands[..., 0] = np.clip(cands[..., 0], 0.0, width - 1.0)
        cands[..., 1] = np.clip(cands[..., 1], 0.0, height - 1.0)
        cont = np.abs(mean_spacing - np.linalg.norm(cands - prev_pts[:, None, :], axis=2))
        curv = np.sum((prev_pts[:, None, :] - 2 * cands + next_pts[:, None, :]) ** 2, axis=2)
        grad = grad_mag[
            np.rint(cands[..., 1]).astype(int), np.rint(cands[..., 0]).astype(int)
        ]
        g_lo = grad.min(axis=1, keepdims=True)
        g_span = np.maximum(grad.max(axis=1, keepdims=True) - g_lo, max(grad_floor, 1e-12))
        energy = (
            cfg.elasticity * norm_rows(cont)
            + cfg.curvature * norm_rows(curv)
            - cfg.gradient * (grad - g_lo) / g_span
        )
        best = np.argmin(energy, axis=1)
        pts = cands[np.arange(len(pts)), best]
        if not np.any(best != 0):
            break
    return pts


def snake_compensate(
    frame: np.ndarray,
    mask: np.ndarray,
    end: str,
    oriented: OrientedBox,
    cfg: SnakeConfig | None = None,
) -> tuple[np.ndarray, bool]:
    """Recover a cropped body end with an active contour.

    A circle of diameter h0/2 is placed just beyond the mismatched end
    along the major axis and evolved greedily on the smoothed gradient
    magnitude; its interior is OR-ed into the mask and closed with a
    7-disk.  Returns ``(mask, applied)``: a collapsed snake leaves the
    mask unchanged with ``applied`` False.  The result is always a
    superset of the input mask.
    """
    cfg = cfg or SnakeConfig()
    h0 = oriented.height
    direction = oriented.axis if end == END_HIGH else -oriented.axis
    low_pt, high_pt = oriented.end_points()
    anchor = high_pt if end == END_HIGH else low_pt
    center = anchor + direction * (h0 / 4.0)
    radius = h0 / 4.0
    angles = np.linspace(0.0, 2 * np.pi, cfg.points, endpoint=False)
    pts = np.stack(
        [center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles)], axis=1
    )
    height, width = frame.shape
    # the recovery is local to the mismatched end: evolve inside a working
    # window around the placement site so the contour cannot wander off to
    # the body's much stronger edges
    corners = [
        anchor - direction * 0.5 * h0 + t * np.array([-direction[1], direction[0]]) * h0
        for t in (-1.0, 1.0)
    ] + [
        anchor + direction * 1.5 * h0 + t * np.array([-direction[1], direction[0]]) * h0
        for t in (-1.0, 1.0)
    ]
    corners = np.array(corners)
    x_lo = max(int(np.floor(corners[:, 0].min())), 0)
    x_hi = min(int(np.ceil(corners[:, 0].max())), width - 1)
    y_lo = max(int(np.floor(corners[:, 1].min())), 0)
    y_hi = min(int(np.ceil(corners[:, 1].max())), height - 1)
    if x_hi <= x_lo or y_hi <= y_lo:
        return mask, False
    grad_mag = ndimage.gaussian_gradient_magnitude(frame.astype(np.float64), cfg.smooth_sigma)
    window_grad = grad_mag[y_lo : y_hi + 1, x_lo : x_hi + 1]
    local = pts - (x_lo, y_lo)
    local[:, 0] = np.clip(local[:, 0], 0, window_grad.shape[1] - 1)
    local[:, 1] = np.clip(local[:, 1], 0, window_grad.shape[0] - 1)
    final = _greedy_snake(local, window_grad, cfg) + (x_lo, y_lo)
    support = grad_mag[
        np.round(final[:, 1]).astype(int), np.round(final[:, 0]).astype(int)
    ]
    if _polygon_area(final) < 3.0 or float(support.mean()) < 1e-6:
        logger.debug("snake collapsed at %s end; mask left unchanged", end)
        return mask, False
    blob = _fill_polygon(final, frame.shape)
    return morph(mask | blob, "close", disk(7)), True


# ---------------------------------------------------------------------------
# Length measurement
# ---------------------------------------------------------------------------


def measure_length(
    mask: np.ndarray,
    patch: DisparityPatch,
    coarse_disparity: float,
    calib: CalibrationParams,
) -> FrameLength:
    """3-D distance between the mask's two extreme principal-axis points.

    End disparities are medians of the refined blocks inside each end
    window, falling back (flagged) to the coarse value when a window
    covers no reliable block.
    """
    ys, xs = np.nonzero(mask)
    if xs.size < 2:
        raise ValueError("mask too small to measure")
    obox = oriented_box_from_points(xs, ys)
    axis = obox.axis
    proj = (xs - obox.cx) * axis[0] + (ys - obox.cy) * axis[1]
    i_low = int(np.argmin(proj))
    i_high = int(np.argmax(proj))
    flags: list[str] = []
    try:
        low_region, high_region = end_regions(obox, mask.shape)
        windows = {END_LOW: low_region.window, END_HIGH: high_region.window}
    except ValueError:
        windows = None
        flags.append("tiny-end-window")
    points_3d = []
    for idx, end in ((i_low, END_LOW), (i_high, END_HIGH)):
        if windows is not None:
            d, fell_back = patch.end_disparity(windows[end], coarse_disparity)
        else:
            d, fell_back = float(coarse_disparity), True
        if fell_back:
            flags.append(f"disparity-fallback-{end}")
        points_3d.append(triangulate(float(xs[idx]), float(ys[idx]), d, calib))
    length = float(np.linalg.norm(points_3d[0] - points_3d[1]))
    return FrameLength(
        head_3d=points_3d[0], tail_3d=points_3d[1], length_m=length, flags=tuple(flags)
    )


def measure_observation(
    left_frame: np.ndarray,
    right_frame: np.ndarray,
    obs: StereoObservation,
    patch: DisparityPatch,
    calib: CalibrationParams,
    theta_sad: float = 16.0,
    snake_cfg: SnakeConfig | None = None,
    compensate: bool = True,
) -> FrameLength:
    """Mismatch check, optional tail compensation, then 3-D length."""
    mask = obs.left.frame_mask(left_frame.shape)
    flags: list[str] = []
    if compensate:
        for end in sorted(detect_mismatch(left_frame, right_frame, obs, theta_sad)):
            mask, applied = snake_compensate(left_frame, mask, end, obs.left.oriented, snake_cfg)
            flags.append(f"compensated-{end}" if applied else f"snake-collapsed-{end}")
    result = measure_length(mask, patch, obs.disparity, calib)
    return FrameLength(
        head_3d=result.head_3d,
        tail_3d=result.tail_3d,
        length_m=result.length_m,
        flags=tuple(flags) + result.flags,
    )


def aggregate_lengths(per_frame: list[FrameLength]) -> LengthEstimate:
    """Median of the per-frame lengths; robust to cropped-frame outliers."""
    if not per_frame:
        raise ValueError("no per-frame measurements to aggregate")
    values = [m.length_m for m in per_frame]
    flags: tuple[str, ...] = tuple(sorted({f for m in per_frame for f in m.flags}))
    return LengthEstimate(
        per_frame=values, reported=float(np.median(values)), flags=flags
    )
