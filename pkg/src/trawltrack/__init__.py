"""Stereo fish tracking for low-contrast, low-frame-rate footage.

Segmentation via double local thresholding and histogram backprojection,
object-height-block stereo pairing, per-target Viterbi data association,
and 3-D body length measurement with tail-end compensation, plus a
synthetic stereo scene generator and evaluation harness.
"""

from .evaluation import EvalReport, TrackForEval, evaluate
from .imaging import OrientedBox, UprightBox
from .measurement import LengthEstimate, SnakeConfig
from .pipeline import (
    FishSegmenter,
    PipelineConfig,
    StereoFishPipeline,
    run_measurement,
    run_tracking,
)
from .segmentation import Detection, SegmentationConfig, segment_frame
from .stereo import CalibrationParams, StereoObservation, match_stereo, triangulate
from .synth import FishSpec, GroundTruth, SceneConfig, synth_generate
from .tracking import CueConfig, TrackRecord, ViterbiTracker

__version__ = "0.1.0"

__all__ = [
    "CalibrationParams",
    "CueConfig",
    "Detection",
    "EvalReport",
    "FishSegmenter",
    "FishSpec",
    "GroundTruth",
    "LengthEstimate",
    "OrientedBox",
    "PipelineConfig",
    "SceneConfig",
    "SegmentationConfig",
    "SnakeConfig",
    "StereoFishPipeline",
    "StereoObservation",
    "TrackForEval",
    "TrackRecord",
    "UprightBox",
    "ViterbiTracker",
    "evaluate",
    "match_stereo",
    "run_measurement",
    "run_tracking",
    "segment_frame",
    "synth_generate",
    "triangulate",
    "__version__",
]
