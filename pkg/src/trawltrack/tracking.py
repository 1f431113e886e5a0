"""Multi-target data association for abrupt, low-frame-rate motion.

Each target owns a trellis whose stages are the per-frame observation
sets; edges carry a four-cue matching cost (vicinity to the motion
projection, depth-normalized area difference, motion direction against a
reference vector, and histogram earth mover's distance), summed over the
two camera views.  The minimum-cost path is recovered by backtracking
when the target's prediction approaches the frame border.  Paths from
different targets may share nodes, which is how occlusions are absorbed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .stereo import CalibrationParams, StereoObservation, area_normalize

logger = logging.getLogger(__name__)

_SIGMA_FLOOR = math.sqrt(np.finfo(np.float64).eps)


@dataclass
class CueConfig:
    """Cue weights and lifecycle parameters for the tracker.

    Sigma values left as None are estimated from the sequence (sample
    standard deviation of each cue over all cross-frame candidate pairs).
    """

    sigma_v: float | None = None
    sigma_a: float | None = None
    sigma_m: float | None = None
    sigma_h: float | None = None
    v_ref: tuple[float, float] = (-1.0, 0.0)
    alpha: float = 0.3
    margin: float = 100.0
    coast_max: int = 10
    z_ref: float = 1.0
    new_target_min_area: float = 0.0

    def __post_init__(self):
        for name in ("sigma_v", "sigma_a", "sigma_m", "sigma_h"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.margin < 0 or self.coast_max < 0:
            raise ValueError("margin and coast_max must be non-negative")

    def resolved(self) -> bool:
        return None not in (self.sigma_v, self.sigma_a, self.sigma_m, self.sigma_h)


@dataclass(frozen=True)
class ViewFeatures:
    """Per-view cue inputs for one observation."""

    pos: np.ndarray  # centroid (x, y)
    area_norm: float  # depth-normalized area
    hist: np.ndarray  # unit-mass 16-bin gray histogram


@dataclass(frozen=True)
class ObsFeatures:
    left: ViewFeatures
    right: ViewFeatures


def observation_features(
    obs: StereoObservation, calib: CalibrationParams, z_ref: float = 1.0
) -> ObsFeatures:
    """Extract the tracker's per-view cue features from an observation."""
    z = calib.depth_of(obs.disparity)
    views = []
    for det in (obs.left, obs.right):
        total = det.hist.sum()
        if total <= 0:
            raise ValueError("detection with empty histogram")
        views.append(
            ViewFeatures(
                pos=np.asarray(det.centroid, dtype=np.float64),
                area_norm=area_normalize(det.area, z, z_ref),
                hist=det.hist.astype(np.float64) / total,
            )
        )
    return ObsFeatures(left=views[0], right=views[1])


def motion_angle(v: np.ndarray, v_ref: np.ndarray) -> float:
    """Angle in [0, pi] between a motion vector and the reference direction.

    A zero motion vector counts as conforming (angle 0): a stationary
    target should not be penalized by the direction cue.
    """
    v = np.asarray(v, dtype=np.float64)
    v_ref = np.asarray(v_ref, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    nr = float(np.linalg.norm(v_ref))
    if nr == 0:
        raise ValueError("reference vector must be non-zero")
    if nv == 0:
        return 0.0
    cos = float(np.dot(v, v_ref) / (nv * nr))
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def emd_histogram(h1: np.ndarray, h2: np.ndarray) -> float:
    """1-D earth mover's distance between two histograms.

    Histograms are normalized to unit mass; the ground distance is the
    bin index difference, giving the cumulative-difference closed form.
    """
    a = np.asarray(h1, dtype=np.float64)
    b = np.asarray(h2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("histograms must have the same bin count")
    if a.sum() <= 0 or b.sum() <= 0:
        raise ValueError("cannot compare zero-mass histograms")
    diff = np.cumsum(a / a.sum() - b / b.sum())
    return float(np.abs(diff).sum())


def matching_cost(
    prediction: np.ndarray, prev: ViewFeatures, cur: ViewFeatures, cues: CueConfig
) -> float:
    """Single-view matching cost between consecutive-frame observations.

    Sum of four squared, sigma-normalized terms: distance of the current
    centroid from the track's motion-projected prediction, normalized
    area difference, motion direction angle, and histogram EMD.
    """
    z_v = float(np.sum((cur.pos - prediction) ** 2)) / cues.sigma_v**2
    z_a = (cur.area_norm - prev.area_norm) ** 2 / cues.sigma_a**2
    theta = motion_angle(cur.pos - prev.pos, np.asarray(cues.v_ref))
    z_m = theta**2 / cues.sigma_m**2
    z_h = emd_histogram(prev.hist, cur.hist) ** 2 / cues.sigma_h**2
    return z_v + z_a + z_m + z_h


def stereo_matching_cost(
    pred_left: np.ndarray,
    pred_right: np.ndarray,
    prev: ObsFeatures,
    cur: ObsFeatures,
    cues: CueConfig,
) -> float:
    """Two-view cost: the sum of the left and right single-view costs."""
    return matching_cost(pred_left, prev.left, cur.left, cues) + matching_cost(
        pred_right, prev.right, cur.right, cues
    )


# ---------------------------------------------------------------------------
# Sigma estimation
# ---------------------------------------------------------------------------


def estimate_sigmas(
    frame_features: list[list[ObsFeatures]], cues: CueConfig
) -> tuple[CueConfig, bool]:
    """Fill unspecified cue sigmas from the sequence's candidate pairs.

    For every pair of observations in consecutive frames and both views,
    collects the raw cue values (centroid displacement, normalized area
    difference, direction angle, EMD) and takes their sample standard
    deviation.  Returns the completed config and a flag telling whether
    any degenerate (zero-spread) cue had to be floored.
    """
    vals: dict[str, list[float]] = {"v": [], "a": [], "m": [], "h": []}
    v_ref = np.asarray(cues.v_ref, dtype=np.float64)
    for prev_frame, cur_frame in zip(frame_features, frame_features[1:]):
        for prev in prev_frame:
            for cur in cur_frame:
                for pv, cv in ((prev.left, cur.left), (prev.right, cur.right)):
                    delta = cv.pos - pv.pos
                    vals["v"].append(float(np.linalg.norm(delta)))
                    vals["a"].append(abs(cv.area_norm - pv.area_norm))
                    vals["m"].append(motion_angle(delta, v_ref))
                    vals["h"].append(emd_histogram(pv.hist, cv.hist))
    if len(vals["v"]) < 2:
        raise ValueError("need at least two candidate pairs to estimate sigmas")
    floored = False
    out = {}
    for key in vals:
        sigma = float(np.std(vals[key], ddof=1))
        if sigma <= 0:
            sigma = max(abs(float(np.mean(vals[key]))), 1.0) * _SIGMA_FLOOR
            floored = True
        out[key] = sigma
    # estimated values fill only the sigmas the caller left unspecified
    resolved = CueConfig(
        sigma_v=cues.sigma_v if cues.sigma_v is not None else out["v"],
        sigma_a=cues.sigma_a if cues.sigma_a is not None else out["a"],
        sigma_m=cues.sigma_m if cues.sigma_m is not None else out["m"],
        sigma_h=cues.sigma_h if cues.sigma_h is not None else out["h"],
        v_ref=cues.v_ref,
        alpha=cues.alpha,
        margin=cues.margin,
        coast_max=cues.coast_max,
        z_ref=cues.z_ref,
        new_target_min_area=cues.new_target_min_area,
    )
    return resolved, floored


# ---------------------------------------------------------------------------
# Trellis machinery
# ---------------------------------------------------------------------------


def viterbi_update(
    prev_costs: np.ndarray, edge_costs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One dynamic-programming stage transition.

    ``edge_costs[i, j]`` is the cost from previous node i to current node
    j.  Returns per-current-node predecessor indices and accumulated
    costs; argmin ties resolve to the smallest predecessor index.
    """
    totals = prev_costs[:, None] + edge_costs
    preds = np.argmin(totals, axis=0)
    return preds, totals[preds, np.arange(edge_costs.shape[1])]


@dataclass
class TrellisNode:
    obs_index: int | None  # None for a coasted (predicted) stage
    feats: ObsFeatures
    pred: int | None  # node index in the previous stage
    cost: float


@dataclass
class Trellis:
    """Per-target staged graph plus motion state."""

    target_id: int
    start_frame: int
    frames: list[int] = field(default_factory=list)
    stages: list[list[TrellisNode]] = field(default_factory=list)
    pos_left: np.ndarray = field(default_factory=lambda: np.zeros(2))
    pos_right: np.ndarray = field(default_factory=lambda: np.zeros(2))
    vel_left: np.ndarray = field(default_factory=lambda: np.zeros(2))
    vel_right: np.ndarray = field(default_factory=lambda: np.zeros(2))
    coast: int = 0
    status: str = "active"

    def predictions(self) -> tuple[np.ndarray, np.ndarray]:
        return self.pos_left + self.vel_left, self.pos_right + self.vel_right


@dataclass(frozen=True)
class TrackStep:
    """One frame of a finished track."""

    frame: int
    obs_index: int | None  # None while the track coasted
    pos_left: tuple[float, float]
    pos_right: tuple[float, float]


@dataclass
class TrackRecord:
    """A finished target: its backtracked path and lifecycle metadata."""

    target_id: int
    start_frame: int
    end_frame: int
    steps: list[TrackStep]
    total_cost: float
    flags: tuple[str, ...] = ()
    length_m: float | None = None

    @property
    def observation_frames(self) -> list[tuple[int, int]]:
        return [(s.frame, s.obs_index) for s in self.steps if s.obs_index is not None]


def viterbi_step(
    trellis: Trellis,
    frame: int,
    feats: list[ObsFeatures],
    cues: CueConfig,
) -> int:
    """Extend a trellis by one observation stage; returns the argmin node.

    Edge costs are the stereo matching costs from every previous-stage
    node to every current observation, with the vicinity term anchored at
    the track-level motion projection.
    """
    if not trellis.stages:
        raise ValueError("trellis has no stages yet")
    pred_left, pred_right = trellis.predictions()
    prev = trellis.stages[-1]
    edge = np.empty((len(prev), len(feats)))
    for i, node in enumerate(prev):
        for j, cur in enumerate(feats):
            edge[i, j] = stereo_matching_cost(pred_left, pred_right, node.feats, cur, cues)
    prev_costs = np.array([n.cost for n in prev])
    preds, costs = viterbi_update(prev_costs, edge)
    stage = [
        TrellisNode(obs_index=j, feats=feats[j], pred=int(preds[j]), cost=float(costs[j]))
        for j in range(len(feats))
    ]
    trellis.stages.append(stage)
    trellis.frames.append(frame)
    return int(np.argmin(costs))


def backtrack(trellis: Trellis) -> TrackRecord:
    """Recover the minimum-cost path from the last stage to the first."""
    if not trellis.stages:
        raise ValueError("cannot backtrack an empty trellis")
    final = trellis.stages[-1]
    best = min(range(len(final)), key=lambda j: (final[j].cost, j))
    steps: list[TrackStep] = []
    node_idx = best
    for stage_idx in range(len(trellis.stages) - 1, -1, -1):
        node = trellis.stages[stage_idx][node_idx]
        steps.append(
            TrackStep(
                frame=trellis.frames[stage_idx],
                obs_index=node.obs_index,
                pos_left=(float(node.feats.left.pos[0]), float(node.feats.left.pos[1])),
                pos_right=(float(node.feats.right.pos[0]), float(node.feats.right.pos[1])),
            )
        )
        node_idx = node.pred if node.pred is not None else 0
    steps.reverse()
    flags = ()
    if trellis.status == "lost":
        flags = ("coast-limit",)
    elif trellis.status == "active":
        flags = ("unterminated",)
    return TrackRecord(
        target_id=trellis.target_id,
        start_frame=trellis.start_frame,
        end_frame=trellis.frames[-1],
        steps=steps,
        total_cost=float(final[best].cost),
        flags=flags,
    )


class ViterbiTracker:
    """Sequential multi-target tracker state machine.

    Frames must be supplied in strictly increasing order by a single
    caller; per-frame cost computation is pure but trellis mutation is
    not thread-safe.
    """

    def __init__(
        self,
        cues: CueConfig,
        calib: CalibrationParams,
        frame_size: tuple[int, int] | None = None,
    ):
        if not cues.resolved():
            raise ValueError("tracker requires fully resolved cue sigmas")
        self.cues = cues
        self.calib = calib
        self.width, self.height = frame_size or (calib.width, calib.height)
        self.trellises: list[Trellis] = []
        self.frame_observations: dict[int, list[StereoObservation]] = {}
        self._next_id = 0
        self._last_frame: int | None = None

    # -- helpers ----------------------------------------------------------

    def _near_border(self, pos: np.ndarray) -> bool:
        m = self.cues.margin
        x, y = float(pos[0]), float(pos[1])
        return x <= m or y <= m or x >= self.width - 1 - m or y >= self.height - 1 - m

    _MIN_EXIT_SPEED = 0.5  # px/frame toward the border

    def _heading_out(self, pos: np.ndarray, vel: np.ndarray) -> bool:
        """Exit test: the prediction left the frame, or sits inside the
        border margin while the track still moves toward that border.

        Proximity alone is not enough: a freshly entered target's damped
        velocity keeps its prediction inside the entry margin for a few
        frames, and it must not be cut there.
        """
        x, y = float(pos[0]), float(pos[1])
        if x < 0 or y < 0 or x > self.width - 1 or y > self.height - 1:
            return True
        m = self.cues.margin
        vx, vy = float(vel[0]), float(vel[1])
        if x <= m and vx < -self._MIN_EXIT_SPEED:
            return True
        if x >= self.width - 1 - m and vx > self._MIN_EXIT_SPEED:
            return True
        if y <= m and vy < -self._MIN_EXIT_SPEED:
            return True
        if y >= self.height - 1 - m and vy > self._MIN_EXIT_SPEED:
            return True
        return False

    def _spawn(self, frame: int, obs_index: int, feats: ObsFeatures) -> Trellis:
        trellis = Trellis(target_id=self._next_id, start_frame=frame)
        self._next_id += 1
        trellis.stages.append([TrellisNode(obs_index=obs_index, feats=feats, pred=None, cost=0.0)])
        trellis.frames.append(frame)
        trellis.pos_left = feats.left.pos.copy()
        trellis.pos_right = feats.right.pos.copy()
        self.trellises.append(trellis)
        return trellis

    def _coast_node(self, trellis: Trellis, frame: int) -> None:
        """Materialize a predicted stage when a frame has no observations."""
        prev = trellis.stages[-1]
        anchor = min(range(len(prev)), key=lambda j: (prev[j].cost, j))
        pred_left, pred_right = trellis.predictions()
        base = prev[anchor].feats
        feats = ObsFeatures(
            left=ViewFeatures(pred_left, base.left.area_norm, base.left.hist),
            right=ViewFeatures(pred_right, base.right.area_norm, base.right.hist),
        )
        trellis.stages.append(
            [TrellisNode(obs_index=None, feats=feats, pred=anchor, cost=prev[anchor].cost)]
        )
        trellis.frames.append(frame)

    # -- main loop --------------------------------------------------------

    def step(self, frame: int, observations: list[StereoObservation]) -> list[TrackRecord]:
        """Process one frame; returns the tracks finished at this frame."""
        if self._last_frame is not None and frame <= self._last_frame:
            raise ValueError("frames must arrive in strictly increasing order")
        self._last_frame = frame
        self.frame_observations[frame] = list(observations)
        feats = [observation_features(o, self.calib, self.cues.z_ref) for o in observations]

        emitted: list[TrackRecord] = []
        selected: set[int] = set()
        survivors: list[Trellis] = []
        for trellis in self.trellises:
            if feats:
                best_j = viterbi_step(trellis, frame, feats, self.cues)
                selected.add(best_j)
                chosen = feats[best_j]
                obs_v_left = chosen.left.pos - trellis.pos_left
                obs_v_right = chosen.right.pos - trellis.pos_right
                a = self.cues.alpha
                trellis.vel_left = a * obs_v_left + (1 - a) * trellis.vel_left
                trellis.vel_right = a * obs_v_right + (1 - a) * trellis.vel_right
                trellis.pos_left = chosen.left.pos.copy()
                trellis.pos_right = chosen.right.pos.copy()
                trellis.coast = 0
            else:
                pred_left, pred_right = trellis.predictions()
                self._coast_node(trellis, frame)
                trellis.pos_left = pred_left
                trellis.pos_right = pred_right
                trellis.coast += 1
                if trellis.coast > self.cues.coast_max:
                    trellis.status = "lost"
                    emitted.append(backtrack(trellis))
                    continue
            next_left, next_right = trellis.predictions()
            if self._heading_out(next_left, trellis.vel_left) or self._heading_out(
                next_right, trellis.vel_right
            ):
                trellis.status = "exited"
                emitted.append(backtrack(trellis))
            else:
                survivors.append(trellis)
        self.trellises = survivors

        for j, obs in enumerate(observations):
            if j in selected:
                continue
            obs_feats = feats[j]
            near = self._near_border(obs_feats.left.pos) or self._near_border(obs_feats.right.pos)
            if near and obs.left.area >= self.cues.new_target_min_area:
                self._spawn(frame, j, obs_feats)
            else:
                logger.debug(
                    "frame %d: observation %d treated as false alarm (near_border=%s)",
                    frame, j, near,
                )
        return emitted

    def finalize(self) -> list[TrackRecord]:
        """Flush all still-active trellises at end of input."""
        emitted = [backtrack(t) for t in self.trellises]
        self.trellises = []
        return emitted
