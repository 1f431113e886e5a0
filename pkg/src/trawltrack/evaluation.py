"""Benchmark metrics against synthetic ground truth.

Frame-level segmentation precision/recall come from greedy one-to-one
IoU matching between detection masks and visible ground-truth fish.
Target-level detection and tracking metrics follow the lifecycle rules:
a target counts as detected when matched in at least half of its visible
frames, as tracked when a single emitted track covers at least half of
them with correctly matched detections, and the tracking success rate is
the ratio of the two counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import UprightBox
from .synth import GroundTruth


@dataclass
class TrackForEval:
    """Minimal track view for scoring: per-frame left-detection indices."""

    track_id: int
    frames: list[tuple[int, int | None]]  # (frame, left detection index)
    length_m: float | None = None


@dataclass
class TargetReport:
    fish_id: int
    visible: int
    detected: int
    correctly_detected: bool
    correctly_tracked: bool
    best_track: int | None
    true_length_m: float
    est_length_m: float | None


@dataclass
class EvalReport:
    n_frames: int
    n_targets: int
    n_tracks: int
    seg_precision: float
    seg_recall: float
    det_precision: float
    det_recall: float
    tracking_success: float
    length_mape: float | None
    targets: list[TargetReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "n_targets": self.n_targets,
            "n_tracks": self.n_tracks,
            "segmentation_precision": self.seg_precision,
            "segmentation_recall": self.seg_recall,
            "detection_precision": self.det_precision,
            "detection_recall": self.det_recall,
            "tracking_success_rate": self.tracking_success,
            "length_mape": self.length_mape,
            "targets": [
                {
                    "fish_id": t.fish_id,
                    "visible_frames": t.visible,
                    "detected_frames": t.detected,
                    "correctly_detected": t.correctly_detected,
                    "correctly_tracked": t.correctly_tracked,
                    "best_track": t.best_track,
                    "true_length_m": t.true_length_m,
                    "est_length_m": t.est_length_m,
                }
                for t in self.targets
            ],
        }

    def table(self) -> str:
        lines = [
            f"frames: {self.n_frames}   targets: {self.n_targets}   tracks: {self.n_tracks}",
            f"segmentation precision/recall: {self.seg_precision:.3f} / {self.seg_recall:.3f}",
            f"detection    precision/recall: {self.det_precision:.3f} / {self.det_recall:.3f}",
            f"tracking success rate:         {self.tracking_success:.3f}",
            "length MAPE:                   "
            + ("n/a" if self.length_mape is None else f"{100 * self.length_mape:.2f}%"),
        ]
        return "\n".join(lines)


def mask_iou(box_a: UprightBox, mask_a: np.ndarray, mask_b_frame: np.ndarray) -> float:
    """IoU between a box-local detection mask and a frame-global GT mask."""
    area_a = int(mask_a.sum())
    area_b = int(mask_b_frame.sum())
    if area_a == 0 or area_b == 0:
        return 0.0
    inter = int((mask_a & mask_b_frame[box_a.slices()]).sum())
    union = area_a + area_b - inter
    return inter / union if union else 0.0


def match_frame(
    detections: list[tuple[UprightBox, np.ndarray]],
    gt_masks: dict[int, np.ndarray],
    iou_thresh: float,
) -> dict[int, int]:
    """Greedy one-to-one matching; returns detection index -> fish id."""
    pairs = []
    for di, (box, mask) in enumerate(detections):
        for fish_id, gt_mask in gt_masks.items():
            iou = mask_iou(box, mask, gt_mask)
            if iou >= iou_thresh:
                pairs.append((iou, di, fish_id))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    taken_det: set[int] = set()
    taken_fish: set[int] = set()
    out: dict[int, int] = {}
    for _, di, fish_id in pairs:
        if di in taken_det or fish_id in taken_fish:
            continue
        taken_det.add(di)
        taken_fish.add(fish_id)
        out[di] = fish_id
    return out


def evaluate(
    detections_per_frame: list[list[tuple[UprightBox, np.ndarray]]],
    tracks: list[TrackForEval],
    gt: GroundTruth,
    iou_thresh: float = 0.5,
) -> EvalReport:
    """Score detections and tracks against exact synthetic ground truth."""
    if not gt.fishes:
        raise ValueError("ground truth contains no targets")
    if len(detections_per_frame) != gt.n_frames:
        raise ValueError("frame count mismatch between detections and ground truth")

    visible: dict[int, set[int]] = {f.fish_id: set(f.visible_frames()) for f in gt.fishes}

    # frame-level greedy matching
    matches: list[dict[int, int]] = []
    n_dets = 0
    n_matched_dets = 0
    n_visible_instances = 0
    for t, dets in enumerate(detections_per_frame):
        gt_masks = {
            f.fish_id: gt.mask(f.fish_id, t, "left") for f in gt.fishes if t in visible[f.fish_id]
        }
        n_visible_instances += len(gt_masks)
        n_dets += len(dets)
        frame_match = match_frame(dets, gt_masks, iou_thresh)
        matches.append(frame_match)
        n_matched_dets += len(frame_match)

    seg_precision = n_matched_dets / n_dets if n_dets else 0.0
    seg_recall = n_matched_dets / n_visible_instances if n_visible_instances else 0.0

    # which fish each track covers, per frame
    track_cover: dict[int, dict[int, int]] = {}  # track -> fish -> frames
    for track in tracks:
        cover: dict[int, int] = {}
        for frame, det_index in track.frames:
            if det_index is None or frame >= len(matches):
                continue
            fish_id = matches[frame].get(det_index)
            if fish_id is not None and frame in visible[fish_id]:
                cover[fish_id] = cover.get(fish_id, 0) + 1
        track_cover[track.track_id] = cover

    lengths = {t.track_id: t.length_m for t in tracks}
    targets: list[TargetReport] = []
    n_detected = 0
    n_tracked = 0
    mape_terms: list[float] = []
    for fish in gt.fishes:
        vis = visible[fish.fish_id]
        detected_frames = sum(
            1
            for t in vis
            if fish.fish_id in matches[t].values()
        )
        correctly_detected = len(vis) > 0 and detected_frames >= len(vis) / 2.0
        best_track = None
        best_frames = 0
        for track in tracks:
            covered = track_cover[track.track_id].get(fish.fish_id, 0)
            if covered > best_frames:
                best_frames = covered
                best_track = track.track_id
        correctly_tracked = (
            correctly_detected and len(vis) > 0 and best_frames >= len(vis) / 2.0
        )
        est = lengths.get(best_track) if best_track is not None else None
        if correctly_tracked and est is not None:
            mape_terms.append(abs(est - fish.length_m) / fish.length_m)
        n_detected += int(correctly_detected)
        n_tracked += int(correctly_tracked)
        targets.append(
            TargetReport(
                fish_id=fish.fish_id,
                visible=len(vis),
                detected=detected_frames,
                correctly_detected=correctly_detected,
                correctly_tracked=correctly_tracked,
                best_track=best_track,
                true_length_m=fish.length_m,
                est_length_m=est,
            )
        )

    # target-level detection precision: tracks that genuinely cover a target
    true_tracks = 0
    for track in tracks:
        cover = track_cover[track.track_id]
        obs_count = sum(1 for _, d in track.frames if d is not None)
        if cover and obs_count > 0 and max(cover.values()) >= obs_count / 2.0:
            true_tracks += 1
    det_precision = true_tracks / len(tracks) if tracks else 0.0
    det_recall = n_detected / len(gt.fishes)
    success = n_tracked / n_detected if n_detected else 0.0

    return EvalReport(
        n_frames=gt.n_frames,
        n_targets=len(gt.fishes),
        n_tracks=len(tracks),
        seg_precision=seg_precision,
        seg_recall=seg_recall,
        det_precision=det_precision,
        det_recall=det_recall,
        tracking_success=success,
        length_mape=float(np.mean(mape_terms)) if mape_terms else None,
        targets=targets,
    )
