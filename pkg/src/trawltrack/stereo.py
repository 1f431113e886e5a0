"""Stereo pairing of detections on rectified frames.

Left/right detections are paired by comparing the four object-height
blocks of the left upright box against candidate block positions inside
each row-overlapping right box, using the mean absolute pixel difference
(per-pixel SAD) as the dissimilarity.  The winning candidate yields a
coarse per-object disparity; a dense block grid refines it around that
value for measurement.  Triangulation follows the rectified pinhole
model Z = f*B/d.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .imaging import UprightBox
from .segmentation import Detection

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationParams:
    """Rectified stereo rig intrinsics and geometry."""

    focal_px: float
    baseline_m: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_px <= 0 or self.baseline_m <= 0:
            raise ValueError("focal length and baseline must be positive")

    def to_dict(self) -> dict:
        return {
            "focal_px": self.focal_px,
            "baseline_m": self.baseline_m,
            "principal_point": [self.cx, self.cy],
            "frame_size": [self.width, self.height],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationParams":
        return cls(
            focal_px=float(data["focal_px"]),
            baseline_m=float(data["baseline_m"]),
            cx=float(data["principal_point"][0]),
            cy=float(data["principal_point"][1]),
            width=int(data["frame_size"][0]),
            height=int(data["frame_size"][1]),
        )

    @classmethod
    def load(cls, path) -> "CalibrationParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def depth_of(self, disparity: float) -> float:
        if disparity <= 0:
            raise ValueError("disparity must be positive")
        return self.focal_px * self.baseline_m / disparity


@dataclass(frozen=True)
class StereoObservation:
    """A matched left/right detection pair, the tracker's atomic unit."""

    left: Detection
    right: Detection
    left_index: int
    right_index: int
    disparity: float  # coarse, pixels
    block_sads: np.ndarray  # per-pixel SAD of the 4 matched blocks
    mu_sad: float  # mean of the 4 minimum block SADs
    single_block: bool = False  # narrow box fell back to one block


@dataclass(frozen=True)
class DisparityBlock:
    """One refined-grid cell: its rectangle and best integer disparity."""

    box: UprightBox
    disparity: int
    sad: float
    reliable: bool
    clamped: bool


@dataclass(frozen=True)
class DisparityPatch:
    """Dense per-block disparities over a detection's upright box."""

    origin: tuple[int, int]
    block_size: int
    blocks: list[DisparityBlock]

    def end_disparity(self, window: UprightBox, fallback: float) -> tuple[float, bool]:
        """Median reliable block disparity whose center lies in ``window``.

        Falls back to the coarse value when no reliable block is covered;
        the second element reports whether the fallback was used.
        """
        inside = [
            b.disparity
            for b in self.blocks
            if b.reliable
            and window.x0 <= b.box.center[0] < window.x1
            and window.y0 <= b.box.center[1] < window.y1
        ]
        if not inside:
            return float(fallback), True
        return float(np.median(inside)), False


def split_object_height_blocks(box: UprightBox) -> tuple[list[UprightBox], bool]:
    """Divide an upright box into 4 side-by-side full-height blocks.

    Widths are floor(w/4) with the remainder assigned to the last block.
    Boxes narrower than 4 pixels fall back to a single block, flagged.
    """
    if box.w < 4:
        return [box], True
    base = box.w // 4
    blocks = []
    for i in range(4):
        w = base if i < 3 else box.w - 3 * base
        blocks.append(UprightBox(box.x0 + i * base, box.y0, w, box.h))
    return blocks, False


def block_sad(left_frame: np.ndarray, right_frame: np.ndarray, block: UprightBox, right_x0: int) -> float:
    """Mean absolute intensity difference between a left block and the
    same-size right window anchored at ``right_x0`` (same rows).

    Both windows are cropped identically to stay inside the frames;
    returns inf when no overlap remains.
    """
    height, width = left_frame.shape
    y0, y1 = max(block.y0, 0), min(block.y1, height)
    lx0, lx1 = max(block.x0, 0), min(block.x1, width)
    rx0 = right_x0 + (lx0 - block.x0)
    if rx0 < 0:
        lx0 -= rx0
        rx0 = 0
    w = min(lx1 - lx0, right_frame.shape[1] - rx0)
    if w <= 0 or y1 <= y0:
        return float("inf")
    lw = left_frame[y0:y1, lx0 : lx0 + w].astype(np.int32)
    rw = right_frame[y0:y1, rx0 : rx0 + w].astype(np.int32)
    return float(np.abs(lw - rw).mean())


def _candidate_score(
    left_frame: np.ndarray,
    right_frame: np.ndarray,
    left_blocks: list[UprightBox],
    right_box: UprightBox,
) -> tuple[float, np.ndarray, float]:
    """Score one right candidate against the left blocks.

    Each left block picks its minimum SAD over the candidate's block
    x-offsets; returns (total score, per-block min SADs, mean disparity
    implied by the matched block centers).
    """
    right_blocks, _ = split_object_height_blocks(right_box)
    sads = np.empty(len(left_blocks))
    disparities = np.empty(len(left_blocks))
    for i, lb in enumerate(left_blocks):
        best = float("inf")
        best_dx = 0.0
        for rb in right_blocks:
            sad = block_sad(left_frame, right_frame, lb, rb.x0)
            if sad < best:
                best = sad
                best_dx = lb.x0 - rb.x0
        sads[i] = best
        disparities[i] = best_dx
    return float(sads.sum()), sads, float(disparities.mean())


def match_stereo(
    left_dets: list[Detection],
    right_dets: list[Detection],
    left_frame: np.ndarray,
    right_frame: np.ndarray,
) -> list[StereoObservation]:
    """Pair left and right detections on rectified epipolar geometry.

    Candidates are gated by vertical box overlap; the per-candidate score
    is the sum over the 4 left object-height blocks of their minimum SAD
    against the candidate's block positions.  Assignment is one-to-one,
    greedy by ascending score; pairs with non-positive coarse disparity
    are rejected.  Unmatched left detections are dropped.
    """
    proposals = []
    for li, ld in enumerate(left_dets):
        blocks, single = split_object_height_blocks(ld.upright)
        for ri, rd in enumerate(right_dets):
            if not ld.upright.rows_overlap(rd.upright):
                continue
            score, sads, disparity = _candidate_score(left_frame, right_frame, blocks, rd.upright)
            if not np.isfinite(score):
                continue
            proposals.append((score, li, ri, sads, disparity, single))
    proposals.sort(key=lambda p: (p[0], p[1], p[2]))
    used_left: set[int] = set()
    used_right: set[int] = set()
    chosen = []
    for score, li, ri, sads, disparity, single in proposals:
        if li in used_left or ri in used_right:
            continue
        used_left.add(li)
        used_right.add(ri)
        if disparity <= 0:
            logger.debug("stereo match left=%d right=%d rejected: disparity %.2f", li, ri, disparity)
            continue
        chosen.append(
            StereoObservation(
                left=left_dets[li],
                right=right_dets[ri],
                left_index=li,
                right_index=ri,
                disparity=disparity,
                block_sads=sads,
                mu_sad=float(sads.mean()),
                single_block=single,
            )
        )
    chosen.sort(key=lambda o: o.left_index)
    return chosen


def refine_disparity(
    left_frame: np.ndarray,
    right_frame: np.ndarray,
    obs: StereoObservation,
    search_range: int = 16,
    block_size: int = 8,
) -> DisparityPatch:
    """Dense block-grid disparity search in [d_o - r, d_o + r].

    The left upright box is tiled with ``block_size`` squares; each block
    containing foreground takes the integer shift minimizing the SAD.
    Blocks whose SAD curve ties at the minimum (e.g. textureless) are
    marked unreliable; shifts that would leave the frame are clamped and
    flagged.
    """
    box = obs.left.upright
    d_lo = int(np.ceil(obs.disparity - search_range))
    d_hi = int(np.floor(obs.disparity + search_range))
    blocks: list[DisparityBlock] = []
    height, width = left_frame.shape
    for by in range(box.y0, box.y1, block_size):
        for bx in range(box.x0, box.x1, block_size):
            cell = UprightBox(
                bx, by, min(block_size, box.x1 - bx), min(block_size, box.y1 - by)
            ).clamped(width, height)
            local = obs.left.mask[
                cell.y0 - box.y0 : cell.y1 - box.y0, cell.x0 - box.x0 : cell.x1 - box.x0
            ]
            if not local.any():
                continue
            sads = []
            clamped = False
            for d in range(d_lo, d_hi + 1):
                rx0 = cell.x0 - d
                if rx0 < 0 or rx0 + cell.w > width:
                    clamped = True
                sads.append(block_sad(left_frame, right_frame, cell, rx0))
            sads = np.asarray(sads)
            best = int(np.argmin(sads))
            ties = int((sads == sads[best]).sum())
            blocks.append(
                DisparityBlock(
                    box=cell,
                    disparity=d_lo + best,
                    sad=float(sads[best]),
                    reliable=ties == 1 and np.isfinite(sads[best]),
                    clamped=clamped,
                )
            )
    return DisparityPatch(origin=(box.x0, box.y0), block_size=block_size, blocks=blocks)


def triangulate(x: float, y: float, disparity: float, calib: CalibrationParams) -> np.ndarray:
    """Back-project an image point with disparity into camera-frame meters."""
    z = calib.depth_of(disparity)
    return np.array(
        [(x - calib.cx) * z / calib.focal_px, (y - calib.cy) * z / calib.focal_px, z]
    )


def project(point: np.ndarray, calib: CalibrationParams) -> tuple[float, float, float]:
    """Project a 3-D camera-frame point to (x_left, y, disparity)."""
    px, py, pz = float(point[0]), float(point[1]), float(point[2])
    if pz <= 0:
        raise ValueError("point must lie in front of the cameras")
    x = calib.cx + calib.focal_px * px / pz
    y = calib.cy + calib.focal_px * py / pz
    return x, y, calib.focal_px * calib.baseline_m / pz


def area_normalize(area: float, z: float, z_ref: float = 1.0) -> float:
    """Rescale an image area as if the object sat at depth ``z_ref``."""
    if z <= 0:
        raise ValueError("depth must be positive")
    return float(area) * (z / z_ref) ** 2
