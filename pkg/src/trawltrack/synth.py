"""Synthetic stereo scene generation with exact ground truth.

Fish are planar elliptical patches in 3-D, rendered analytically into
both rectified views (per-pixel inverse projection), so the disparity
field, per-view supports, centroids and true lengths are known exactly.
Scenes reproduce the capture conditions the pipeline is built for: low
contrast, abrupt per-frame displacements, frequent border entry/exit,
drifting diagonal netting, vignetting, sensor noise and small debris
blobs.  Everything is driven by one seeded generator, so a config is
bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from .stereo import CalibrationParams


def default_calibration(width: int = 512, height: int = 512) -> CalibrationParams:
    return CalibrationParams(
        focal_px=900.0,
        baseline_m=0.14,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


@dataclass
class FishSpec:
    """One fish: 3-D pose/motion plus its appearance model."""

    length_m: float
    aspect: float  # half-width / half-length
    center0: tuple[float, float, float]  # meters, at frame 0
    velocity: tuple[float, float, float]  # meters per frame
    phi: float  # in-plane angle of the +u axis (trailing end)
    psi: float  # depth tilt of the major axis
    contrast: float  # gray levels above background at the head
    mottle_amp: float
    mottle_phase: float
    # axial intensity profile: plateau, then a ramp down to the fin level;
    # fin level is per view to model view-dependent fin reflectivity
    fin_start: float
    fin_ramp: float
    fin_level_left: float  # fraction of contrast
    fin_level_right: float
    # a thin caudal-fin lobe past the ramp: half-thickness in meters
    # (None renders a plain ellipse)
    fin_thickness_m: float | None = None
    entry_frame: int = 0

    def center_at(self, t: int) -> np.ndarray:
        c = np.asarray(self.center0) + np.asarray(self.velocity) * t
        return c

    def axes_m(self) -> tuple[float, float]:
        return self.length_m / 2.0, self.length_m / 2.0 * self.aspect

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "FishSpec":
        data = dict(data)
        data["center0"] = tuple(data["center0"])
        data["velocity"] = tuple(data["velocity"])
        return cls(**data)


@dataclass
class SceneConfig:
    """Everything needed to render one deterministic stereo sequence."""

    width: int = 512
    height: int = 512
    frames: int = 12
    seed: int = 0
    background: float = 60.0
    noise_sigma: float = 1.2
    vignette: float = 0.1
    fish_count: int = 3
    length_range: tuple[float, float] = (0.22, 0.34)
    aspect_range: tuple[float, float] = (0.24, 0.3)
    contrast_range: tuple[float, float] = (30.0, 45.0)
    mottle_range: tuple[float, float] = (0.25, 0.33)
    speed_px: tuple[float, float] = (30.0, 95.0)
    z_range: tuple[float, float] = (1.6, 2.6)
    blob_rate: float = 3.0
    web: bool = False
    web_spacing: int = 48
    web_amp: float = 30.0
    dim_tail: bool = False
    # fish entry frames are drawn from [0, entry_window); defaults to
    # spreading entries over most of the sequence
    entry_window: int | None = None
    # a fish counts as visible once this much of it shows in both views;
    # partial slivers at the border are not reliably characterizable
    area_floor: float = 400.0
    calib: CalibrationParams = field(default_factory=default_calibration)
    fish: list[FishSpec] | None = None  # explicit fish override

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "calib":
                out[f.name] = value.to_dict()
            elif f.name == "fish":
                out[f.name] = None if value is None else [s.to_dict() for s in value]
            else:
                out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        if "calib" in data and isinstance(data["calib"], dict):
            data["calib"] = CalibrationParams.from_dict(data["calib"])
        if data.get("fish"):
            data["fish"] = [FishSpec.from_dict(d) for d in data["fish"]]
        for name, f in ((f.name, f) for f in fields(cls)):
            if name in data and isinstance(data[name], list) and name != "fish":
                data[name] = tuple(data[name])
        return cls(**data)


@dataclass
class GTFrame:
    """Per-frame ground truth for one fish."""

    t: int
    visible: bool
    centroid_left: tuple[float, float] | None
    bbox_left: tuple[int, int, int, int] | None
    bbox_right: tuple[int, int, int, int] | None
    z_m: float
    disparity: float


@dataclass
class GTFish:
    fish_id: int
    spec: FishSpec
    frames: list[GTFrame]

    @property
    def length_m(self) -> float:
        return self.spec.length_m

    def visible_frames(self) -> list[int]:
        return [f.t for f in self.frames if f.visible]


@dataclass
class GroundTruth:
    width: int
    height: int
    n_frames: int
    area_floor: float
    calib: CalibrationParams
    fishes: list[GTFish]

    def mask(self, fish_id: int, t: int, view: str) -> np.ndarray:
        """Reconstruct a fish's analytic in-frame support for one view."""
        spec = self.fishes[fish_id].spec
        support, _, _ = fish_support(
            spec, t, view, self.calib, (self.height, self.width)
        )
        return support

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "frames": self.n_frames,
            "area_floor": self.area_floor,
            "calib": self.calib.to_dict(),
            "fishes": [
                {
                    "id": fish.fish_id,
                    "length_m": fish.length_m,
                    "spec": fish.spec.to_dict(),
                    "frames": [
                        {
                            "t": fr.t,
                            "visible": fr.visible,
                            "centroid_left": list(fr.centroid_left)
                            if fr.centroid_left
                            else None,
                            "bbox_left": list(fr.bbox_left) if fr.bbox_left else None,
                            "bbox_right": list(fr.bbox_right) if fr.bbox_right else None,
                            "z_m": fr.z_m,
                            "disparity": fr.disparity,
                        }
                        for fr in fish.frames
                    ],
                }
                for fish in self.fishes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        fishes = []
        for entry in data["fishes"]:
            frames = [
                GTFrame(
                    t=fr["t"],
                    visible=fr["visible"],
                    centroid_left=tuple(fr["centroid_left"]) if fr["centroid_left"] else None,
                    bbox_left=tuple(fr["bbox_left"]) if fr["bbox_left"] else None,
                    bbox_right=tuple(fr["bbox_right"]) if fr["bbox_right"] else None,
                    z_m=fr["z_m"],
                    disparity=fr["disparity"],
                )
                for fr in entry["frames"]
            ]
            fishes.append(GTFish(entry["id"], FishSpec.from_dict(entry["spec"]), frames))
        return cls(
            width=data["width"],
            height=data["height"],
            n_frames=data["frames"],
            area_floor=data["area_floor"],
            calib=CalibrationParams.from_dict(data["calib"]),
            fishes=fishes,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Analytic rendering
# ---------------------------------------------------------------------------


def _axes_vectors(phi: float, psi: float) -> tuple[np.ndarray, np.ndarray]:
    e1 = np.array([np.cos(phi) * np.cos(psi), np.sin(phi) * np.cos(psi), -np.sin(psi)])
    e2 = np.array([-np.sin(phi), np.cos(phi), 0.0])
    return e1, e2


def fish_support(
    spec: FishSpec,
    t: int,
    view: str,
    calib: CalibrationParams,
    shape: tuple[int, int],
):
    """In-frame support of a fish in one view, by inverse projection.

    Solves the 2x2 system mapping each pixel's normalized ray to the
    planar patch coordinates (u, v); the support is the unit disk.
    Returns (mask, u_field, v_field), all over the full frame.
    """
    if view not in ("left", "right"):
        raise ValueError("view must be 'left' or 'right'")
    height, width = shape
    center = spec.center_at(t)
    a_m, b_m = spec.axes_m()
    e1, e2 = _axes_vectors(spec.phi, spec.psi)
    offset = 0.0 if view == "left" else calib.baseline_m

    # conservative image-space bounding box from the patch's 3-D extent
    reach = a_m * np.abs(e1) + b_m * np.abs(e2)
    z_min = max(center[2] - reach[2], 1e-3)
    cx_px = calib.cx + calib.focal_px * (center[0] - offset) / center[2]
    cy_px = calib.cy + calib.focal_px * center[1] / center[2]
    r_px = calib.focal_px * float(np.hypot(reach[0], reach[1])) / z_min + 2
    x0 = max(int(cx_px - r_px), 0)
    x1 = min(int(cx_px + r_px) + 1, width)
    y0 = max(int(cy_px - r_px), 0)
    y1 = min(int(cy_px + r_px) + 1, height)
    mask = np.zeros(shape, dtype=bool)
    u_field = np.zeros(shape)
    v_field = np.zeros(shape)
    if x1 <= x0 or y1 <= y0:
        return mask, u_field, v_field

    ys, xs = np.mgrid[y0:y1, x0:x1]
    x_n = (xs - calib.cx) / calib.focal_px
    y_n = (ys - calib.cy) / calib.focal_px
    # [u a (x_n e1z - e1x) + v b (x_n e2z - e2x) = (Cx - offset) - x_n Cz]
    # [u a (y_n e1z - e1y) + v b (y_n e2z - e2y) = Cy - y_n Cz]
    a11 = a_m * (x_n * e1[2] - e1[0])
    a12 = b_m * (x_n * e2[2] - e2[0])
    a21 = a_m * (y_n * e1[2] - e1[1])
    a22 = b_m * (y_n * e2[2] - e2[1])
    rhs1 = (center[0] - offset) - x_n * center[2]
    rhs2 = center[1] - y_n * center[2]
    det = a11 * a22 - a12 * a21
    safe = np.abs(det) > 1e-12
    u = np.where(safe, (rhs1 * a22 - rhs2 * a12) / np.where(safe, det, 1.0), 2.0)
    v = np.where(safe, (a11 * rhs2 - a21 * rhs1) / np.where(safe, det, 1.0), 2.0)
    inside = (u * u + v * v) <= 1.0
    if spec.fin_thickness_m is not None:
        fin_base = spec.fin_start + spec.fin_ramp
        inside &= (u <= fin_base) | (np.abs(v) * b_m <= spec.fin_thickness_m)
    depth = center[2] + u * a_m * e1[2]  # e2 has no z component
    inside &= depth > 0.05
    mask[y0:y1, x0:x1] = inside
    u_field[y0:y1, x0:x1] = np.where(inside, u, 0.0)
    v_field[y0:y1, x0:x1] = np.where(inside, v, 0.0)
    return mask, u_field, v_field


def fish_intensity(spec: FishSpec, u: np.ndarray, v: np.ndarray, view: str) -> np.ndarray:
    """Contrast above background over the fish surface.

    Axial plateau with a ramp down to the fin level (per view), a mild
    transverse falloff, and low-frequency surface mottle that survives
    the web-removal opening and feeds block matching.
    """
    fin_level = spec.fin_level_left if view == "left" else spec.fin_level_right
    ramp = np.clip((u - spec.fin_start) / max(spec.fin_ramp, 1e-6), 0.0, 1.0)
    axial = 1.0 - (1.0 - fin_level) * ramp
    transverse = 1.0 - 0.22 * v * v
    mottle = 1.0 + spec.mottle_amp * np.sin(3.0 * np.pi * u + spec.mottle_phase) * np.cos(
        1.5 * np.pi * v + 0.7 * spec.mottle_phase
    )
    body = spec.contrast * axial * transverse * mottle
    # the fin stays a thin uniform membrane: no mottle where the ramp ended
    return np.where(ramp >= 1.0, spec.contrast * fin_level, body)


def _random_fish(cfg: SceneConfig, rng: np.random.Generator, lane_y: float, entry: int) -> FishSpec:
    z = rng.uniform(*cfg.z_range)
    length_m = float(rng.uniform(*cfg.length_range))
    speed = rng.uniform(*cfg.speed_px)
    angle = rng.normal(np.pi, 0.06)  # mostly leftward image motion
    vx_px = speed * np.cos(angle)
    vy_px = speed * np.sin(angle)
    vel_m = (vx_px * z / cfg.calib.focal_px, vy_px * z / cfg.calib.focal_px, 0.0)
    # before its entry frame the fish sits fully beyond the right border and
    # swims in, so its first detections are slivers at the frame edge
    half_len_px = length_m / 2.0 * cfg.calib.focal_px / z
    x_entry_px = cfg.width + half_len_px + rng.uniform(0.0, 0.4 * speed) - speed
    x_m = (x_entry_px - cfg.calib.cx) * z / cfg.calib.focal_px - vel_m[0] * entry
    y_m = (lane_y - cfg.calib.cy) * z / cfg.calib.focal_px - vel_m[1] * entry
    phi = float(np.arctan2(-vy_px, -vx_px))  # +u axis trails the motion
    aspect = float(rng.uniform(*cfg.aspect_range))
    fin_thickness = None
    if cfg.dim_tail:
        # the caudal fin: a thin membrane that reflects towards the left
        # camera but not the right one; segmentation's morphology drops it
        # in both views, so its recovery falls to the end-mismatch check.
        # Its length stays within reach of the h0/2 recovery circle.
        fin_left, fin_right = 0.8, 0.02
        fin_ramp = 0.04
        fin_start = 1.0 - 0.8 * aspect - fin_ramp + rng.uniform(-0.02, 0.02)
        fin_thickness = min(0.2 * length_m / 2.0 * aspect, 0.0055)
    else:
        fin_left = fin_right = 0.62
        fin_start, fin_ramp = 0.35, 0.65
    return FishSpec(
        length_m=length_m,
        aspect=aspect,
        center0=(float(x_m), float(y_m), float(z)),
        velocity=tuple(float(v) for v in vel_m),
        phi=phi,
        psi=0.0,
        contrast=float(rng.uniform(*cfg.contrast_range)),
        mottle_amp=float(rng.uniform(*cfg.mottle_range)),
        mottle_phase=float(rng.uniform(0, 2 * np.pi)),
        fin_start=float(fin_start),
        fin_ramp=float(fin_ramp),
        fin_level_left=fin_left,
        fin_level_right=fin_right,
        fin_thickness_m=fin_thickness,
        entry_frame=entry,
    )


def _bbox_of(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(np.ptp(xs) + 1), int(np.ptp(ys) + 1))


def synth_generate(
    cfg: SceneConfig,
) -> tuple[list[np.ndarray], list[np.ndarray], GroundTruth]:
    """Render a deterministic stereo sequence with exact ground truth."""
    rng = np.random.default_rng(cfg.seed)
    calib = cfg.calib
    height, width = cfg.height, cfg.width
    max_len_px = cfg.length_range[1] * calib.focal_px / cfg.z_range[0]
    if max_len_px >= min(width, height):
        raise ValueError("configured fish would not fit inside the frame")

    if cfg.fish is not None:
        fish = list(cfg.fish)
    else:
        fish = []
        entry_span = cfg.entry_window or max(cfg.frames - 4, 1)
        for i in range(cfg.fish_count):
            lane = height * (i + 1) / (cfg.fish_count + 1) + rng.uniform(-18, 18)
            entry = int(rng.integers(0, entry_span))
            fish.append(_random_fish(cfg, rng, lane, entry))

    # base illumination with optional vignette
    ys, xs = np.mgrid[0:height, 0:width]
    r2 = ((xs - width / 2) ** 2 + (ys - height / 2) ** 2) / ((width / 2) ** 2 + (height / 2) ** 2)
    base = cfg.background * (1.0 - cfg.vignette * r2)

    # per-frame blob parameters drawn up front, in a fixed order
    blob_frames = []
    for _ in range(cfg.frames):
        blobs = []
        for _ in range(rng.poisson(cfg.blob_rate)):
            z = rng.uniform(*cfg.z_range)
            # debris stays under the segmentation area floor
            blobs.append(
                FishSpec(
                    length_m=float(rng.uniform(2.5, 5.5) * z / calib.focal_px * 2),
                    aspect=float(rng.uniform(0.5, 0.9)),
                    center0=(
                        float((rng.uniform(0, width) - calib.cx) * z / calib.focal_px),
                        float((rng.uniform(0, height) - calib.cy) * z / calib.focal_px),
                        float(z),
                    ),
                    velocity=(0.0, 0.0, 0.0),
                    phi=float(rng.uniform(0, np.pi)),
                    psi=0.0,
                    contrast=float(rng.uniform(15.0, 40.0)),
                    mottle_amp=0.0,
                    mottle_phase=0.0,
                    fin_start=1.0,
                    fin_ramp=1.0,
                    fin_level_left=1.0,
                    fin_level_right=1.0,
                )
            )
        blob_frames.append(blobs)

    web_offsets = rng.integers(0, cfg.web_spacing, size=(cfg.frames, 2)) if cfg.web else None

    left_frames: list[np.ndarray] = []
    right_frames: list[np.ndarray] = []
    gt_frames: list[list[GTFrame]] = [[] for _ in fish]

    for t in range(cfg.frames):
        canvases = {}
        for view in ("left", "right"):
            canvas = base.copy()
            if cfg.web:
                ox, oy = web_offsets[t]
                grid = ((xs + ys + ox) % cfg.web_spacing == 0) | (
                    (xs - ys + oy) % cfg.web_spacing == 0
                )
                canvas = canvas + np.where(grid, cfg.web_amp, 0.0)
            canvases[view] = canvas

        # far-to-near paint order so nearer bodies occlude
        order = sorted(range(len(fish)), key=lambda i: -fish[i].center_at(t)[2])
        per_view_masks: dict[str, list[np.ndarray | None]] = {
            "left": [None] * len(fish),
            "right": [None] * len(fish),
        }
        for i in order:
            for view in ("left", "right"):
                mask, u, v = fish_support(fish[i], t, view, calib, (height, width))
                per_view_masks[view][i] = mask
                if mask.any():
                    contrast = fish_intensity(fish[i], u[mask], v[mask], view)
                    canvases[view][mask] = base[mask] + contrast
        for blob in blob_frames[t]:
            for view in ("left", "right"):
                mask, u, v = fish_support(blob, t, view, calib, (height, width))
                if mask.any():
                    canvases[view][mask] = base[mask] + blob.contrast

        for view, store in (("left", left_frames), ("right", right_frames)):
            noisy = canvases[view] + rng.normal(0.0, cfg.noise_sigma, size=(height, width))
            store.append(np.clip(np.rint(noisy), 0, 255).astype(np.uint8))

        for i, spec in enumerate(fish):
            mask_l = per_view_masks["left"][i]
            mask_r = per_view_masks["right"][i]
            area_l = int(mask_l.sum())
            area_r = int(mask_r.sum())
            z = float(spec.center_at(t)[2])
            visible = area_l >= cfg.area_floor and area_r >= cfg.area_floor
            ys_l, xs_l = np.nonzero(mask_l)
            centroid = (
                (float(xs_l.mean()), float(ys_l.mean())) if area_l else None
            )
            gt_frames[i].append(
                GTFrame(
                    t=t,
                    visible=visible,
                    centroid_left=centroid,
                    bbox_left=_bbox_of(mask_l),
                    bbox_right=_bbox_of(mask_r),
                    z_m=z,
                    disparity=calib.focal_px * calib.baseline_m / z,
                )
            )

    fishes = [GTFish(i, spec, gt_frames[i]) for i, spec in enumerate(fish)]
    gt = GroundTruth(
        width=width,
        height=height,
        n_frames=cfg.frames,
        area_floor=cfg.area_floor,
        calib=calib,
        fishes=fishes,
    )
    return left_frames, right_frames, gt
