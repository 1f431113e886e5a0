"""File formats: binary PGM frames, detection/track JSON, lengths CSV.

All JSON is written with sorted keys and a trailing newline so repeated
runs with the same inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .imaging import UprightBox
from .segmentation import Detection
from .tracking import TrackRecord, TrackStep

LEFT_PATTERN = "L_{:06d}.pgm"
RIGHT_PATTERN = "R_{:06d}.pgm"


# ---------------------------------------------------------------------------
# PGM (binary, 8-bit)
# ---------------------------------------------------------------------------


def write_pgm(path, frame: np.ndarray) -> None:
    frame = np.ascontiguousarray(frame, dtype=np.uint8)
    if frame.ndim != 2:
        raise ValueError("PGM frames must be 2-D")
    header = f"P5\n{frame.shape[1]} {frame.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frame.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    match = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not match:
        raise ValueError(f"{path}: not a binary PGM file")
    width, height, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = np.frombuffer(data[match.end() :], dtype=np.uint8, count=width * height)
    return pixels.reshape(height, width).copy()


def write_frame_dir(out_dir, left_frames, right_frames) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(left_frames):
        write_pgm(out / LEFT_PATTERN.format(t), frame)
    for t, frame in enumerate(right_frames):
        write_pgm(out / RIGHT_PATTERN.format(t), frame)


def load_frame_dir(frames_dir, pattern: str = "L_*.pgm") -> list[np.ndarray]:
    paths = sorted(Path(frames_dir).glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no frames matching {pattern!r} in {frames_dir}")
    return [read_pgm(p) for p in paths]


def load_stereo_dir(frames_dir) -> tuple[list[np.ndarray], list[np.ndarray]]:
    left = load_frame_dir(frames_dir, "L_*.pgm")
    right = load_frame_dir(frames_dir, "R_*.pgm")
    if len(left) != len(right):
        raise ValueError("left/right frame counts differ")
    return left, right


# ---------------------------------------------------------------------------
# Mask run-length encoding (row-major, starts with a zero run)
# ---------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    runs: list[int] = []
    value = False
    run = 0
    for bit in flat:
        if bit == value:
            run += 1
        else:
            runs.append(run)
            value = not value
            run = 1
    runs.append(run)
    return runs


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = shape[0] * shape[1]
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    if pos != total:
        raise ValueError("run lengths do not cover the mask")
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# detections.json
# ---------------------------------------------------------------------------


def detections_to_dict(per_frame: list[list[Detection]], width: int, height: int) -> dict:
    return {
        "width": width,
        "height": height,
        "frames": [
            {
                "t": t,
                "detections": [
                    {
                        "box": [d.upright.x0, d.upright.y0, d.upright.w, d.upright.h],
                        "centroid": [d.centroid[0], d.centroid[1]],
                        "area": d.area,
                        "mean": d.mean_intensity,
                        "variance": d.variance,
                        "mask_rle": rle_encode(d.mask),
                    }
                    for d in dets
                ],
            }
            for t, dets in enumerate(per_frame)
        ],
    }


def load_detection_masks(data: dict) -> list[list[tuple[UprightBox, np.ndarray]]]:
    """Frame-indexed (box, box-local mask) pairs from a detections dict."""
    out = []
    for frame in data["frames"]:
        entries = []
        for det in frame["detections"]:
            box = UprightBox(*det["box"])
            entries.append((box, rle_decode(det["mask_rle"], (box.h, box.w))))
        out.append(entries)
    return out


# ---------------------------------------------------------------------------
# tracks.json
# ---------------------------------------------------------------------------


def tracks_to_dict(records: list[TrackRecord], observations_by_frame: dict) -> dict:
    targets = []
    for record in records:
        frames = []
        for step in record.steps:
            if step.obs_index is not None:
                obs = observations_by_frame[step.frame][step.obs_index]
                frames.append(
                    {
                        "t": step.frame,
                        "left_box": [obs.left.upright.x0, obs.left.upright.y0,
                                     obs.left.upright.w, obs.left.upright.h],
                        "right_box": [obs.right.upright.x0, obs.right.upright.y0,
                                      obs.right.upright.w, obs.right.upright.h],
                        "centroid": [obs.left.centroid[0], obs.left.centroid[1]],
                        "disparity": obs.disparity,
                        "obs": step.obs_index,
                        "left_det": obs.left_index,
                    }
                )
            else:
                frames.append(
                    {
                        "t": step.frame,
                        "left_box": None,
                        "right_box": None,
                        "centroid": [step.pos_left[0], step.pos_left[1]],
                        "disparity": None,
                        "obs": None,
                        "left_det": None,
                    }
                )
        targets.append(
            {
                "id": record.target_id,
                "frames": frames,
                "length_m": record.length_m,
                "flags": list(record.flags),
                "total_cost": record.total_cost,
            }
        )
    return {"targets": targets}


def tracks_from_dict(data: dict) -> list[TrackRecord]:
    records = []
    for target in data["targets"]:
        steps = []
        for fr in target["frames"]:
            steps.append(
                TrackStep(
                    frame=fr["t"],
                    obs_index=fr["obs"],
                    pos_left=tuple(fr["centroid"]),
                    pos_right=(
                        fr["centroid"][0] - (fr["disparity"] or 0.0),
                        fr["centroid"][1],
                    ),
                )
            )
        records.append(
            TrackRecord(
                target_id=target["id"],
                start_frame=steps[0].frame if steps else 0,
                end_frame=steps[-1].frame if steps else 0,
                steps=steps,
                total_cost=target.get("total_cost", 0.0),
                flags=tuple(target.get("flags", ())),
                length_m=target.get("length_m"),
            )
        )
    return records


# ---------------------------------------------------------------------------
# misc
# ---------------------------------------------------------------------------


def dump_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_lengths_csv(path, records: list[TrackRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "frames", "length_m", "flags"])
        for record in records:
            writer.writerow(
                [
                    record.target_id,
                    len(record.observation_frames),
                    "" if record.length_m is None else f"{record.length_m:.6f}",
                    "|".join(record.flags),
                ]
            )


def read_lengths_csv(path) -> dict[int, float | None]:
    out: dict[int, float | None] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            value = row["length_m"]
            out[int(row["id"])] = float(value) if value else None
    return out
