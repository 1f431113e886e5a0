"""Grayscale raster primitives shared by every pipeline stage.

All images are 2-D numpy arrays indexed ``[y, x]``: 8-bit ``uint8`` for
intensity frames and ``bool`` for binary masks.  Point-like quantities
(centroids, box corners, velocities) are always expressed as ``(x, y)``
pixel coordinates.  Every function here is pure: no shared mutable state,
safe to call concurrently on read-only inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# ---------------------------------------------------------------------------
# Input validation helpers
# ---------------------------------------------------------------------------


def as_gray_frame(image) -> np.ndarray:
    """Validate and return a 2-D uint8 intensity frame.

    Accepts any array-like with values representable in [0, 255]; floats
    are rounded.  Raises ValueError for empty or non-2-D input.
    """
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected non-empty 2-D frame, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.rint(arr)
    if np.any(arr < 0) or np.any(arr > 255):
        raise ValueError("frame intensities must lie in [0, 255]")
    return arr.astype(np.uint8)


def as_binary_mask(mask, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate and return a 2-D bool mask, optionally checking its shape."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected non-empty 2-D mask, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"mask shape {arr.shape} does not match frame shape {shape}")
    return arr.astype(bool)


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UprightBox:
    """Axis-parallel rectangle: top-left corner (x0, y0), size w x h pixels."""

    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"degenerate box {self}")

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + (self.w - 1) / 2.0, self.y0 + (self.h - 1) / 2.0)

    def clamped(self, width: int, height: int) -> "UprightBox":
        """Intersect with the frame rectangle; raises if empty."""
        x0 = max(self.x0, 0)
        y0 = max(self.y0, 0)
        x1 = min(self.x1, width)
        y1 = min(self.y1, height)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"box {self} lies outside {width}x{height} frame")
        return UprightBox(x0, y0, x1 - x0, y1 - y0)

    def slices(self) -> tuple[slice, slice]:
        """(row, column) slices for indexing a frame array."""
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def rows_overlap(self, other: "UprightBox") -> bool:
        return self.y0 < other.y1 and other.y0 < self.y1


@dataclass(frozen=True)
class OrientedBox:
    """PCA-aligned rectangle around a pixel set.

    ``width`` is the extent along the first principal component, ``height``
    along the second (width >= height), ``angle`` the first component's
    direction in radians within [-pi/2, pi/2).
    """

    cx: float
    cy: float
    width: float
    height: float
    angle: float

    @property
    def axis(self) -> np.ndarray:
        """Unit vector (x, y) of the first principal component."""
        return np.array([np.cos(self.angle), np.sin(self.angle)])

    def end_points(self) -> tuple[np.ndarray, np.ndarray]:
        """The two extreme points of the major axis (low end, high end)."""
        c = np.array([self.cx, self.cy])
        off = (self.width / 2.0) * self.axis
        return c - off, c + off


# ---------------------------------------------------------------------------
# Structuring elements
# ---------------------------------------------------------------------------


def disk(size: int) -> np.ndarray:
    """Flat disk footprint of bounding size ``size`` (odd).

    Pixel offset (i, j) belongs to the disk iff i**2 + j**2 <= (size/2)**2.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError("disk size must be odd and >= 1")
    r = size // 2
    ii, jj = np.mgrid[-r : r + 1, -r : r + 1]
    return (ii * ii + jj * jj) <= (size / 2.0) ** 2


def rect(size: int) -> np.ndarray:
    """Flat square footprint of odd side ``size``."""
    if size < 1 or size % 2 == 0:
        raise ValueError("rect size must be odd and >= 1")
    return np.ones((size, size), dtype=bool)


def diagonal_line(length: int) -> np.ndarray:
    """1-pixel-thick line from top-left to bottom-right, given length."""
    if length < 1:
        raise ValueError("line length must be >= 1")
    return np.eye(length, dtype=bool)


def antidiagonal_line(length: int) -> np.ndarray:
    """1-pixel-thick line from top-right to bottom-left, given length."""
    return np.fliplr(diagonal_line(length))


def reflect(se: np.ndarray) -> np.ndarray:
    """Point reflection of a structuring element about its center."""
    return se[::-1, ::-1]


# ---------------------------------------------------------------------------
# Morphology (flat structuring elements, replicated borders)
# ---------------------------------------------------------------------------

_MORPH_OPS = ("erode", "dilate", "open", "close", "gradient")


def morph(image: np.ndarray, op: str, se: np.ndarray) -> np.ndarray:
    """Flat-structuring-element morphology with border replication.

    ``op`` is one of erode/dilate/open/close/gradient; works on uint8
    frames and bool masks alike and returns the same dtype.  The gradient
    is dilation minus erosion.
    """
    if op not in _MORPH_OPS:
        raise ValueError(f"unknown morphological op {op!r}")
    se = np.asarray(se, dtype=bool)
    if op == "erode":
        return ndimage.minimum_filter(image, footprint=se, mode="nearest")
    if op == "dilate":
        return ndimage.maximum_filter(image, footprint=se, mode="nearest")
    if op == "open":
        return morph(morph(image, "erode", se), "dilate", se)
    if op == "close":
        return morph(morph(image, "dilate", se), "erode", se)
    hi = morph(image, "dilate", se)
    lo = morph(image, "erode", se)
    if image.dtype == bool:
        return hi & ~lo
    return (hi.astype(np.int16) - lo.astype(np.int16)).astype(image.dtype)


def median3x3(image: np.ndarray) -> np.ndarray:
    """3x3 median filter with replicated borders; preserves dtype."""
    return ndimage.median_filter(image, size=3, mode="nearest")


# ---------------------------------------------------------------------------
# Histograms and thresholds
# ---------------------------------------------------------------------------


def masked_histogram(frame: np.ndarray, mask: np.ndarray | None, bins: int = 16) -> np.ndarray:
    """Gray-level histogram of the pixels selected by ``mask``.

    Bin ``b`` covers the intensity range [b*256/bins, (b+1)*256/bins).
    An all-zero mask yields an all-zero histogram.
    """
    if 256 % bins != 0:
        raise ValueError("bins must divide 256")
    values = frame if mask is None else frame[as_binary_mask(mask, frame.shape)]
    scaled = values.astype(np.int64) * bins // 256
    return np.bincount(scaled.ravel(), minlength=bins).astype(np.int64)


def otsu_threshold(hist: np.ndarray) -> tuple[int, bool]:
    """Threshold minimizing intra-class variance of a 256-bin histogram.

    Returns ``(tau, degenerate)``.  The lower class is the set of levels
    strictly below tau; ties are broken by the smallest tau.  If all mass
    sits at a single level, that level is returned with the degenerate
    flag set.
    """
    h = np.asarray(hist, dtype=np.float64)
    if h.shape != (256,):
        raise ValueError("otsu_threshold expects a 256-bin histogram")
    total = h.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    occupied = np.nonzero(h)[0]
    if occupied.size == 1:
        return int(occupied[0]), True

    # Between-class variance maximization via cumulative moments; the
    # intra-class minimizer is identical (total variance is fixed).
    levels = np.arange(256, dtype=np.float64)
    w_lo = np.cumsum(h)[:-1]  # mass of levels < tau, tau = 1..255
    m_lo = np.cumsum(h * levels)[:-1]
    w_hi = total - w_lo
    m_hi = (h * levels).sum() - m_lo
    valid = (w_lo > 0) & (w_hi > 0)
    sigma_b = np.zeros(255)
    num = m_lo[valid] * w_hi[valid] - m_hi[valid] * w_lo[valid]
    sigma_b[valid] = (num * num) / (w_lo[valid] * w_hi[valid])
    return int(np.argmax(sigma_b)) + 1, False


def lower_class_mean(hist: np.ndarray, tau: float) -> float:
    """Count-weighted mean of the levels strictly below tau (tau if none)."""
    h = np.asarray(hist, dtype=np.float64)
    levels = np.arange(h.size, dtype=np.float64)
    below = levels < tau
    mass = h[below].sum()
    if mass <= 0:
        return float(tau)
    return float((h[below] * levels[below]).sum() / mass)


def shifted_threshold(hist: np.ndarray, tau: float, p: float) -> float:
    """Shift a threshold toward the lower-class mean by factor ``p``.

    tau_x = tau - p * (tau - mu_L) where mu_L is the mean of the levels
    strictly below tau; preserves dim targets whose intensity sits just
    under the unshifted threshold.
    """
    if p < 0:
        raise ValueError("shift factor must be non-negative")
    mu_l = lower_class_mean(hist, tau)
    return float(tau - p * (tau - mu_l))


# ---------------------------------------------------------------------------
# Connected components and PCA boxes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Component:
    """One connected component: label, member pixels and upright box."""

    label: int
    ys: np.ndarray
    xs: np.ndarray
    area: int
    box: UprightBox


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[Component]:
    """Label the foreground of a binary mask (8-connected by default)."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = as_binary_mask(mask)
    structure = np.ones((3, 3), dtype=bool) if connectivity == 8 else None
    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return []
    out: list[Component] = []
    slices = ndimage.find_objects(labels)
    for lab, sl in enumerate(slices, start=1):
        ys, xs = np.nonzero(labels[sl] == lab)
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        box = UprightBox(
            int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)
        )
        out.append(Component(lab, ys, xs, int(ys.size), box))
    return out


def oriented_box_from_points(xs: np.ndarray, ys: np.ndarray) -> OrientedBox:
    """PCA-oriented bounding box of a non-empty pixel set.

    Width/height are the peak-to-peak extents (plus one pixel) of the
    projections onto the two principal axes; a single pixel degenerates
    to a 1x1 box at angle 0.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("empty pixel set")
    cx, cy = float(xs.mean()), float(ys.mean())
    if xs.size == 1:
        return OrientedBox(cx, cy, 1.0, 1.0, 0.0)
    dx = xs - cx
    dy = ys - cy
    cov = np.array([[np.mean(dx * dx), np.mean(dx * dy)], [np.mean(dx * dy), np.mean(dy * dy)]])
    evals, evecs = np.linalg.eigh(cov)
    e1 = evecs[:, 1]  # eigh sorts ascending
    e2 = evecs[:, 0]
    p1 = dx * e1[0] + dy * e1[1]
    p2 = dx * e2[0] + dy * e2[1]
    width = float(np.ptp(p1)) + 1.0
    height = float(np.ptp(p2)) + 1.0
    angle = float(np.arctan2(e1[1], e1[0]))
    if width < height:
        width, height = height, width
        angle += np.pi / 2.0
    # normalize to [-pi/2, pi/2)
    angle = (angle + np.pi / 2.0) % np.pi - np.pi / 2.0
    return OrientedBox(cx, cy, width, height, angle)


def centroid_of(ys: np.ndarray, xs: np.ndarray) -> tuple[float, float]:
    """Sub-pixel centroid (x, y) of a pixel set."""
    return float(np.mean(xs)), float(np.mean(ys))
