"""Pipeline orchestration and scikit-learn style estimator facade.

``run_tracking``/``run_measurement`` are the functional entry points the
CLI uses.  ``FishSegmenter`` (a transformer: frames in, detections out)
and ``StereoFishPipeline`` (fit estimates the cue standard deviations
from a sequence, predict emits finished tracks) wrap them so the
pipeline composes with the wider estimator ecosystem.

Per-frame segmentation fans out over a thread pool with ordered
collection; tracking consumes observations strictly in frame order.  The
``TRAWLTRACK_THREADS`` environment variable caps the pool size.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .evaluation import TrackForEval
from .measurement import SnakeConfig, aggregate_lengths, measure_observation
from .segmentation import Detection, SegmentationConfig, segment_frame
from .stereo import CalibrationParams, StereoObservation, match_stereo, refine_disparity
from .tracking import (
    CueConfig,
    TrackRecord,
    ViterbiTracker,
    estimate_sigmas,
    observation_features,
)

logger = logging.getLogger(__name__)

# conservative fallback when a sequence has too few candidate pairs to
# estimate the cue spreads from data
FALLBACK_SIGMAS = {"sigma_v": 100.0, "sigma_a": 500.0, "sigma_m": np.pi / 4, "sigma_h": 2.0}


def thread_count() -> int:
    env = os.environ.get("TRAWLTRACK_THREADS", "").strip()
    if env:
        return max(int(env), 1)
    return max(os.cpu_count() or 1, 1)


def parallel_map(fn, items):
    """Ordered map over a bounded thread pool."""
    items = list(items)
    workers = min(thread_count(), max(len(items), 1))
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class PipelineConfig:
    """One bundle of every stage's tunables (field-tuned defaults)."""

    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    cues: CueConfig = field(default_factory=CueConfig)
    snake: SnakeConfig = field(default_factory=SnakeConfig)
    theta_sad: float = 16.0
    refine_range: int = 16
    refine_block: int = 8
    compensate: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        seg = SegmentationConfig.from_dict(data.pop("segmentation", {}))
        cues = CueConfig(**data.pop("tracking", {}))
        snake = SnakeConfig(**data.pop("snake", {}))
        known = {"theta_sad", "refine_range", "refine_block", "compensate"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown pipeline keys: {sorted(unknown)}")
        return cls(segmentation=seg, cues=cues, snake=snake, **data)


@dataclass
class TrackingRun:
    """Everything produced by one pass over a stereo sequence."""

    tracks: list[TrackRecord]
    detections_left: list[list[Detection]]
    detections_right: list[list[Detection]]
    observations: list[list[StereoObservation]]
    cues: CueConfig
    sigmas_estimated: bool

    def tracks_for_eval(self) -> list[TrackForEval]:
        out = []
        for record in self.tracks:
            frames = []
            for step in record.steps:
                if step.obs_index is None:
                    frames.append((step.frame, None))
                else:
                    obs = self.observations[step.frame][step.obs_index]
                    frames.append((step.frame, obs.left_index))
            out.append(TrackForEval(record.target_id, frames, record.length_m))
        return out


def segment_sequence(
    frames: list[np.ndarray], config: SegmentationConfig
) -> list[list[Detection]]:
    return parallel_map(lambda f: segment_frame(f, config), frames)


def resolve_cues(
    observations: list[list[StereoObservation]],
    calib: CalibrationParams,
    cues: CueConfig,
) -> tuple[CueConfig, bool]:
    """Fill unspecified sigmas from the sequence, with a static fallback."""
    if cues.resolved():
        return cues, False
    feats = [
        [observation_features(o, calib, cues.z_ref) for o in frame] for frame in observations
    ]
    try:
        resolved, floored = estimate_sigmas(feats, cues)
        if floored:
            logger.warning("degenerate cue spread floored during sigma estimation")
        return resolved, True
    except ValueError:
        logger.warning("too few candidate pairs; falling back to static sigmas")
        merged = {
            name: getattr(cues, name) if getattr(cues, name) is not None else value
            for name, value in FALLBACK_SIGMAS.items()
        }
        return (
            CueConfig(
                **merged,
                v_ref=cues.v_ref,
                alpha=cues.alpha,
                margin=cues.margin,
                coast_max=cues.coast_max,
                z_ref=cues.z_ref,
                new_target_min_area=cues.new_target_min_area,
            ),
            False,
        )


def run_tracking(
    left_frames: list[np.ndarray],
    right_frames: list[np.ndarray],
    calib: CalibrationParams,
    config: PipelineConfig | None = None,
) -> TrackingRun:
    """Segment both views, pair them, and associate across frames."""
    if len(left_frames) != len(right_frames):
        raise ValueError("left/right sequences must have the same length")
    config = config or PipelineConfig()
    dets_left = segment_sequence(left_frames, config.segmentation)
    dets_right = segment_sequence(right_frames, config.segmentation)
    observations = [
        match_stereo(dl, dr, lf, rf)
        for dl, dr, lf, rf in zip(dets_left, dets_right, left_frames, right_frames)
    ]
    cues, estimated = resolve_cues(observations, calib, config.cues)
    if cues.new_target_min_area <= 0:
        cues = dataclasses.replace(
            cues, new_target_min_area=config.segmentation.theta_area_low
        )
    tracker = ViterbiTracker(cues, calib, (left_frames[0].shape[1], left_frames[0].shape[0]))
    records: list[TrackRecord] = []
    for t, obs in enumerate(observations):
        records.extend(tracker.step(t, obs))
    records.extend(tracker.finalize())
    records.sort(key=lambda r: r.target_id)
    return TrackingRun(
        tracks=records,
        detections_left=dets_left,
        detections_right=dets_right,
        observations=observations,
        cues=cues,
        sigmas_estimated=estimated,
    )


def run_measurement(
    run: TrackingRun,
    left_frames: list[np.ndarray],
    right_frames: list[np.ndarray],
    calib: CalibrationParams,
    config: PipelineConfig | None = None,
) -> None:
    """Fill each track's length from its per-frame observations (median)."""
    config = config or PipelineConfig()

    def measure_track(record: TrackRecord):
        per_frame = []
        flags: list[str] = []
        for step in record.steps:
            if step.obs_index is None:
                continue
            obs = run.observations[step.frame][step.obs_index]
            patch = refine_disparity(
                left_frames[step.frame],
                right_frames[step.frame],
                obs,
                config.refine_range,
                config.refine_block,
            )
            try:
                per_frame.append(
                    measure_observation(
                        left_frames[step.frame],
                        right_frames[step.frame],
                        obs,
                        patch,
                        calib,
                        theta_sad=config.theta_sad,
                        snake_cfg=config.snake,
                        compensate=config.compensate,
                    )
                )
            except ValueError:
                flags.append(f"unmeasurable-frame-{step.frame}")
        return record, per_frame, flags

    for record, per_frame, flags in parallel_map(measure_track, run.tracks):
        if per_frame:
            estimate = aggregate_lengths(per_frame)
            record.length_m = estimate.reported
            record.flags = tuple(sorted(set(record.flags) | set(estimate.flags) | set(flags)))
        else:
            record.flags = tuple(sorted(set(record.flags) | {"unmeasured"} | set(flags)))


# ---------------------------------------------------------------------------
# Estimator facade
# ---------------------------------------------------------------------------


class FishSegmenter(BaseEstimator, TransformerMixin):
    """Transformer from grayscale frames to per-frame detection lists.

    Stateless (`fit` is a no-op); parameters mirror SegmentationConfig so
    grid search and cloning work through get_params/set_params.
    """

    def __init__(
        self,
        p_low: float = 1.0,
        p_high: float = 0.7,
        theta_bp: float = 0.3,
        theta_area_low: float = 2e3,
        theta_area_high: float = 1e6,
        theta_var: float = 30.0,
        hist_bins: int = 16,
        ellipse_scale: float = 1.5,
        web_se_len: int = 7,
        post_se_size: int = 7,
        dark_targets: bool = False,
        connectivity: int = 8,
    ):
        self.p_low = p_low
        self.p_high = p_high
        self.theta_bp = theta_bp
        self.theta_area_low = theta_area_low
        self.theta_area_high = theta_area_high
        self.theta_var = theta_var
        self.hist_bins = hist_bins
        self.ellipse_scale = ellipse_scale
        self.web_se_len = web_se_len
        self.post_se_size = post_se_size
        self.dark_targets = dark_targets
        self.connectivity = connectivity

    def config(self) -> SegmentationConfig:
        return SegmentationConfig(**self.get_params())

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        """Segment one frame (2-D array) or a sequence of frames."""
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return segment_frame(X, self.config())
        return segment_sequence(list(X), self.config())


class StereoFishPipeline(BaseEstimator):
    """End-to-end estimator: stereo frame sequences to finished tracks.

    ``fit`` runs segmentation and stereo pairing to estimate the cue
    standard deviations from the sequence (stored as ``cues_``);
    ``predict`` returns the TrackRecords, with lengths when ``measure``
    is set.  ``fit_predict`` shares one segmentation pass.
    """

    def __init__(
        self,
        calib: CalibrationParams | None = None,
        config: PipelineConfig | None = None,
        measure: bool = True,
    ):
        self.calib = calib
        self.config = config
        self.measure = measure

    def _require_calib(self) -> CalibrationParams:
        if self.calib is None:
            raise ValueError("calibration parameters are required")
        return self.calib

    def fit(self, X, y=None):
        left_frames, right_frames = X
        config = self.config or PipelineConfig()
        run = run_tracking(left_frames, right_frames, self._require_calib(), config)
        self.cues_ = run.cues
        self.sigmas_estimated_ = run.sigmas_estimated
        return self

    def predict(self, X) -> list[TrackRecord]:
        return self.fit_predict(X)

    def fit_predict(self, X, y=None) -> list[TrackRecord]:
        left_frames, right_frames = X
        config = self.config or PipelineConfig()
        run = run_tracking(left_frames, right_frames, self._require_calib(), config)
        self.cues_ = run.cues
        self.sigmas_estimated_ = run.sigmas_estimated
        self.last_run_ = run
        if self.measure:
            run_measurement(run, left_frames, right_frames, self._require_calib(), config)
        return run.tracks
