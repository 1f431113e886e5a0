"""Data association tests: cue math, sigma estimation, Viterbi optimality
against exhaustive enumeration, and tracker lifecycle scenarios."""

import itertools

import numpy as np
import pytest

from conftest import make_obs
from trawltrack.tracking import (
    CueConfig,
    ObsFeatures,
    Trellis,
    TrellisNode,
    ViewFeatures,
    ViterbiTracker,
    backtrack,
    emd_histogram,
    estimate_sigmas,
    matching_cost,
    motion_angle,
    observation_features,
    stereo_matching_cost,
    viterbi_step,
    viterbi_update,
)

UNIT_CUES = CueConfig(sigma_v=1.0, sigma_a=1.0, sigma_m=1.0, sigma_h=1.0)


def unit_hist(bin_index, bins=16):
    h = np.zeros(bins)
    h[bin_index] = 1.0
    return h


def vf(x, y, area=100.0, hist_bin=4):
    return ViewFeatures(pos=np.array([x, y], dtype=float), area_norm=area, hist=unit_hist(hist_bin))


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def emd_transport(p, q):
    """Greedy mass transport between bins (optimal for 1-D |i-j| costs)."""
    supply = np.asarray(p, dtype=np.float64).copy()
    demand = np.asarray(q, dtype=np.float64).copy()
    supply /= supply.sum()
    demand /= demand.sum()
    i = j = 0
    cost = 0.0
    while i < supply.size and j < demand.size:
        flow = min(supply[i], demand[j])
        cost += flow * abs(i - j)
        supply[i] -= flow
        demand[j] -= flow
        if supply[i] <= 1e-15:
            i += 1
        if demand[j] <= 1e-15:
            j += 1
    return cost


def exhaustive_min_path(first_costs, edges):
    """Enumerate every stage-wise path; returns (best path, best cost)."""
    sizes = [len(first_costs)] + [e.shape[1] for e in edges]
    best_path, best_cost = None, np.inf
    for path in itertools.product(*(range(n) for n in sizes)):
        cost = first_costs[path[0]]
        for t, e in enumerate(edges):
            cost += e[path[t], path[t + 1]]
        if cost < best_cost:
            best_cost = cost
            best_path = path
    return best_path, best_cost


def run_viterbi_chain(first_costs, edges):
    """Drive viterbi_update over raw matrices and backtrack the best path."""
    costs = np.asarray(first_costs, dtype=float)
    pred_history = []
    for e in edges:
        preds, costs = viterbi_update(costs, e)
        pred_history.append(preds)
    j = int(np.argmin(costs))
    path = [j]
    for preds in reversed(pred_history):
        path.append(int(preds[path[-1]]))
    path.reverse()
    return tuple(path), float(costs[j])


# ---------------------------------------------------------------------------
# Motion angle
# ---------------------------------------------------------------------------


def test_motion_angle_reference_cases():
    v_ref = np.array([-1.0, 0.0])
    assert motion_angle(np.array([-2.0, 0.0]), v_ref) == pytest.approx(0.0)
    assert motion_angle(np.array([3.0, 0.0]), v_ref) == pytest.approx(np.pi)
    assert motion_angle(np.array([0.0, 1.0]), v_ref) == pytest.approx(np.pi / 2)


def test_motion_angle_zero_vector_conforms():
    assert motion_angle(np.zeros(2), np.array([-1.0, 0.0])) == 0.0


def test_motion_angle_rejects_zero_reference():
    with pytest.raises(ValueError):
        motion_angle(np.array([1.0, 0.0]), np.zeros(2))


# ---------------------------------------------------------------------------
# EMD
# ---------------------------------------------------------------------------


def test_emd_identity():
    h = np.array([1, 2, 3, 4.0])
    assert emd_histogram(h, h) == 0.0


def test_emd_point_masses():
    assert emd_histogram(unit_hist(2), unit_hist(7)) == pytest.approx(5.0)
    assert emd_histogram(unit_hist(2), unit_hist(7)) == pytest.approx(
        emd_transport(unit_hist(2), unit_hist(7))
    )


def test_emd_matches_transport_oracle():
    rng = np.random.default_rng(31)
    for _ in range(300):
        a = rng.random(16) + 1e-6
        b = rng.random(16) + 1e-6
        assert emd_histogram(a, b) == pytest.approx(emd_transport(a, b), abs=1e-10)


def test_emd_triangle_inequality():
    rng = np.random.default_rng(37)
    for _ in range(300):
        a, b, c = (rng.random(16) + 1e-6 for _ in range(3))
        assert emd_histogram(a, c) <= emd_histogram(a, b) + emd_histogram(b, c) + 1e-9


def test_emd_rejects_zero_mass():
    with pytest.raises(ValueError):
        emd_histogram(np.zeros(16), unit_hist(3))


# ---------------------------------------------------------------------------
# Matching cost
# ---------------------------------------------------------------------------


def test_cost_zero_for_perfect_continuation():
    prev = vf(100.0, 50.0)
    cur = vf(98.0, 50.0)  # moved along v_ref
    cost = matching_cost(np.array([98.0, 50.0]), prev, cur, UNIT_CUES)
    assert cost == 0.0


def test_cost_unit_sigma_displacement():
    prev = vf(100.0, 50.0)
    cur = vf(99.0, 50.0)
    cost = matching_cost(np.array([100.0, 50.0]), prev, cur, UNIT_CUES)
    assert cost == pytest.approx(1.0)  # z_v = 1, all other terms 0


def test_cost_sums_four_terms():
    rng = np.random.default_rng(41)
    cues = CueConfig(sigma_v=3.0, sigma_a=7.0, sigma_m=0.9, sigma_h=2.5)
    for _ in range(100):
        prev = ViewFeatures(
            pos=rng.uniform(0, 500, 2),
            area_norm=rng.uniform(50, 500),
            hist=rng.random(16) + 1e-6,
        )
        cur = ViewFeatures(
            pos=rng.uniform(0, 500, 2),
            area_norm=rng.uniform(50, 500),
            hist=rng.random(16) + 1e-6,
        )
        prediction = rng.uniform(0, 500, 2)
        expected = (
            np.sum((cur.pos - prediction) ** 2) / cues.sigma_v**2
            + (cur.area_norm - prev.area_norm) ** 2 / cues.sigma_a**2
            + motion_angle(cur.pos - prev.pos, np.array(cues.v_ref)) ** 2 / cues.sigma_m**2
            + emd_transport(prev.hist, cur.hist) ** 2 / cues.sigma_h**2
        )
        got = matching_cost(prediction, prev, cur, cues)
        assert got == pytest.approx(expected, rel=1e-9)
        assert got >= 0.0


def test_stereo_cost_additivity():
    prev = ObsFeatures(left=vf(100, 50), right=vf(40, 50))
    cur = ObsFeatures(left=vf(90, 55), right=vf(31, 55))
    pl, pr = np.array([95.0, 52.0]), np.array([33.0, 52.0])
    left = matching_cost(pl, prev.left, cur.left, UNIT_CUES)
    right = matching_cost(pr, prev.right, cur.right, UNIT_CUES)
    assert stereo_matching_cost(pl, pr, prev, cur, UNIT_CUES) == left + right


# ---------------------------------------------------------------------------
# Sigma estimation
# ---------------------------------------------------------------------------


def test_sigma_two_pairs_sample_std():
    # vicinity values {0, 2} -> sample std sqrt(2)
    f0 = [ObsFeatures(left=vf(10, 10), right=vf(5, 10))]
    f1 = [ObsFeatures(left=vf(10, 10), right=vf(3, 10))]
    cues, floored = estimate_sigmas([f0, f1], CueConfig())
    assert cues.sigma_v == pytest.approx(np.sqrt(2.0))
    assert not floored or cues.sigma_v > 0


def test_sigma_degenerate_floored():
    f0 = [ObsFeatures(left=vf(10, 10), right=vf(5, 10))]
    f1 = [ObsFeatures(left=vf(8, 10), right=vf(3, 10))]
    cues, floored = estimate_sigmas([f0, f1], CueConfig())
    assert floored  # every cue except vicinity has zero spread here
    assert cues.sigma_a > 0 and cues.sigma_m > 0 and cues.sigma_h > 0


def test_sigma_requires_pairs():
    with pytest.raises(ValueError):
        estimate_sigmas([[ObsFeatures(left=vf(1, 1), right=vf(0, 1))]], CueConfig())


def test_sigma_matches_offline_recomputation(calib):
    rng = np.random.default_rng(43)
    frames = []
    for t in range(5):
        obs = [
            make_obs(
                400 - 60 * t + rng.uniform(-5, 5),
                100 + 40 * k,
                disparity=140 + k,
                hist_bin=int(rng.integers(2, 9)),
            )
            for k in range(3)
        ]
        frames.append([observation_features(o, calib) for o in obs])
    cues, _ = estimate_sigmas(frames, CueConfig())
    # independent single-pass recomputation
    collected = {"v": [], "a": [], "m": [], "h": []}
    for t in range(4):
        for p in frames[t]:
            for c in frames[t + 1]:
                for view in ("left", "right"):
                    pv, cv = getattr(p, view), getattr(c, view)
                    d = cv.pos - pv.pos
                    collected["v"].append(np.hypot(*d))
                    collected["a"].append(abs(cv.area_norm - pv.area_norm))
                    collected["m"].append(motion_angle(d, np.array([-1.0, 0.0])))
                    collected["h"].append(emd_transport(pv.hist, cv.hist))
    assert cues.sigma_v == pytest.approx(np.std(collected["v"], ddof=1))
    assert cues.sigma_a == pytest.approx(np.std(collected["a"], ddof=1))
    assert cues.sigma_m == pytest.approx(np.std(collected["m"], ddof=1))
    assert cues.sigma_h == pytest.approx(np.std(collected["h"], ddof=1))


def test_sigma_overrides_respected():
    f0 = [ObsFeatures(left=vf(10, 10), right=vf(5, 10))]
    f1 = [ObsFeatures(left=vf(8, 12), right=vf(3, 12))]
    cues, _ = estimate_sigmas([f0, f1], CueConfig(sigma_v=99.0))
    assert cues.sigma_v == 99.0


# ---------------------------------------------------------------------------
# Viterbi core vs exhaustive enumeration
# ---------------------------------------------------------------------------


def test_viterbi_single_edge_chain():
    path, cost = run_viterbi_chain([0.0], [np.array([[2.5]])])
    assert path == (0, 0) and cost == 2.5


def test_viterbi_tie_breaks_to_smaller_index():
    edges = [np.array([[1.0, 5.0], [1.0, 5.0]])]
    preds, costs = viterbi_update(np.zeros(2), edges[0])
    assert preds[0] == 0  # equal-cost predecessors -> smaller index


def test_viterbi_matches_exhaustive_small_random():
    rng = np.random.default_rng(47)
    for _ in range(200):
        n_stages = rng.integers(2, 7)
        sizes = rng.integers(1, 6, size=n_stages)
        edges = [rng.random((sizes[t], sizes[t + 1])) * 10 for t in range(n_stages - 1)]
        first = np.zeros(sizes[0])
        path, cost = run_viterbi_chain(first, edges)
        exp_path, exp_cost = exhaustive_min_path(first, edges)
        assert cost == pytest.approx(exp_cost, abs=1e-12)
        assert path == exp_path


def test_trellis_backtrack_matches_enumeration(calib):
    """Feature-driven trellis paths agree with brute force over the same costs."""
    rng = np.random.default_rng(53)
    cues = CueConfig(sigma_v=50.0, sigma_a=100.0, sigma_m=1.0, sigma_h=1.0)
    for _ in range(20):
        frames = []
        for t in range(4):
            frames.append(
                [
                    observation_features(
                        make_obs(
                            700 - 110 * t + rng.uniform(-40, 40),
                            rng.uniform(120, 280),
                            disparity=150,
                            hist_bin=int(rng.integers(2, 7)),
                        ),
                        calib,
                    )
                    for _ in range(int(rng.integers(1, 4)))
                ]
            )
        trellis = Trellis(target_id=0, start_frame=0)
        trellis.stages.append([TrellisNode(0, frames[0][0], None, 0.0)])
        trellis.frames.append(0)
        trellis.pos_left = frames[0][0].left.pos.copy()
        trellis.pos_right = frames[0][0].right.pos.copy()
        edges = []
        for t in range(1, 4):
            pl, pr = trellis.predictions()
            prev_nodes = trellis.stages[-1]
            edge = np.array(
                [
                    [
                        stereo_matching_cost(pl, pr, pn.feats, cf, cues)
                        for cf in frames[t]
                    ]
                    for pn in prev_nodes
                ]
            )
            edges.append(edge)
            best = viterbi_step(trellis, t, frames[t], cues)
            chosen = frames[t][best]
            trellis.vel_left = 0.3 * (chosen.left.pos - trellis.pos_left) + 0.7 * trellis.vel_left
            trellis.vel_right = (
                0.3 * (chosen.right.pos - trellis.pos_right) + 0.7 * trellis.vel_right
            )
            trellis.pos_left = chosen.left.pos.copy()
            trellis.pos_right = chosen.right.pos.copy()
        record = backtrack(trellis)
        exp_path, exp_cost = exhaustive_min_path([0.0], edges)
        assert record.total_cost == pytest.approx(exp_cost, abs=1e-9)
        assert tuple(s.obs_index for s in record.steps) == exp_path


def test_backtrack_single_stage():
    feats = ObsFeatures(left=vf(10, 10), right=vf(5, 10))
    trellis = Trellis(target_id=3, start_frame=7)
    trellis.stages.append([TrellisNode(0, feats, None, 0.0)])
    trellis.frames.append(7)
    record = backtrack(trellis)
    assert record.total_cost == 0.0
    assert [s.frame for s in record.steps] == [7]


# ---------------------------------------------------------------------------
# Tracker lifecycle scenarios
# ---------------------------------------------------------------------------


def tracker_with(calib, **kw):
    defaults = dict(sigma_v=200.0, sigma_a=500.0, sigma_m=2.0, sigma_h=2.0, margin=100.0)
    defaults.update(kw)
    return ViterbiTracker(CueConfig(**defaults), calib)


def test_single_target_crossing(calib):
    tracker = tracker_with(calib)
    emitted = []
    for t, x in enumerate([1150.0, 950.0, 750.0, 550.0, 350.0]):
        emitted += tracker.step(t, [make_obs(x, 200.0)])
    emitted += tracker.finalize()
    assert len(emitted) == 1
    record = emitted[0]
    assert record.observation_frames == [(t, 0) for t in range(5)]
    # vicinity residuals shrink as the velocity estimate converges
    assert record.total_cost < 10.0


def test_two_targets_share_merged_observation(calib):
    tracker = tracker_with(calib)
    frames = [
        [make_obs(1150, 80), make_obs(1150, 320)],
        [make_obs(900, 150), make_obs(900, 250)],
        [make_obs(700, 200)],
        [make_obs(500, 200)],
        [make_obs(300, 270), make_obs(300, 130)],
    ]
    emitted = []
    for t, obs in enumerate(frames):
        emitted += tracker.step(t, obs)
    emitted += tracker.finalize()
    assert len(emitted) == 2
    for record in emitted:
        path = dict(record.observation_frames)
        assert path[2] == 0 and path[3] == 0  # both paths include the merged node
        assert len(record.observation_frames) == 5
    finals = {dict(r.observation_frames)[4] for r in emitted}
    assert finals == {0, 1}  # tracks separate again after the occlusion


def test_false_alarm_away_from_border_spawns_nothing(calib):
    tracker = tracker_with(calib)
    tracker.step(0, [make_obs(1150, 200)])
    tracker.step(1, [make_obs(950, 200), make_obs(600, 200)])
    assert len(tracker.trellises) == 1


def test_small_area_near_border_spawns_nothing(calib):
    tracker = tracker_with(calib, new_target_min_area=150.0)
    tracker.step(0, [make_obs(1150, 200, area=40)])
    assert tracker.trellises == []


def test_track_exits_at_border(calib):
    tracker = tracker_with(calib)
    emitted = tracker.step(0, [make_obs(1150, 200)])
    assert emitted == []
    emitted = tracker.step(1, [make_obs(400, 200)])
    # velocity alpha-blend: v = 0.3 * (-750) = -225, prediction 175 -> exit
    assert len(emitted) == 1
    assert emitted[0].flags == ()
    assert tracker.trellises == []


def test_lost_track_coasts_then_flushes(calib):
    tracker = tracker_with(calib, coast_max=2)
    tracker.step(0, [make_obs(1150, 200)])
    tracker.step(1, [make_obs(1100, 200)])
    emitted = []
    emitted += tracker.step(2, [])
    emitted += tracker.step(3, [])
    emitted += tracker.step(4, [])
    assert len(emitted) == 1
    record = emitted[0]
    assert "coast-limit" in record.flags
    assert [s.obs_index for s in record.steps] == [0, 0, None, None, None]


def test_velocity_update_convexity(calib):
    rng = np.random.default_rng(59)
    tracker = tracker_with(calib, alpha=0.3)
    x, y = 1150.0, 200.0
    tracker.step(0, [make_obs(x, y)])
    for t in range(1, 4):
        prev_v = tracker.trellises[0].vel_left.copy()
        prev_pos = tracker.trellises[0].pos_left.copy()
        x -= rng.uniform(20, 60)
        y += rng.uniform(-10, 10)
        tracker.step(t, [make_obs(x, y)])
        if not tracker.trellises:
            break
        new_v = tracker.trellises[0].vel_left
        obs_v = np.array([x, y]) - prev_pos
        for k in range(2):
            lo, hi = sorted((prev_v[k], obs_v[k]))
            assert lo - 1e-9 <= new_v[k] <= hi + 1e-9


def test_tracker_determinism(calib):
    frames = [
        [make_obs(1150, 80), make_obs(1150, 320)],
        [make_obs(950, 120), make_obs(950, 280)],
        [make_obs(750, 160), make_obs(750, 240)],
        [make_obs(550, 180), make_obs(550, 220)],
    ]

    def run():
        tracker = tracker_with(calib)
        out = []
        for t, obs in enumerate(frames):
            out += tracker.step(t, obs)
        out += tracker.finalize()
        return out

    a, b = run(), run()
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        assert ra.observation_frames == rb.observation_frames
        assert ra.total_cost == rb.total_cost


def test_per_target_independence(calib):
    """A second target's presence must not change the first one's path."""
    frames_two = [
        [make_obs(1150, 80), make_obs(1150, 320)],
        [make_obs(950, 100), make_obs(950, 300)],
        [make_obs(750, 120), make_obs(750, 280)],
        [make_obs(550, 140), make_obs(550, 260)],
    ]
    tracker = tracker_with(calib)
    out_two = []
    for t, obs in enumerate(frames_two):
        out_two += tracker.step(t, obs)
    out_two += tracker.finalize()
    target_a = next(r for r in out_two if r.steps[0].pos_left[1] == 80.0)

    tracker = tracker_with(calib)
    out_one = []
    for t, obs in enumerate(frames_two):
        out_one += tracker.step(t, obs[:1])
    out_one += tracker.finalize()
    assert len(out_one) == 1
    assert [s.pos_left for s in out_one[0].steps] == [s.pos_left for s in target_a.steps]


def test_out_of_order_frame_rejected(calib):
    tracker = tracker_with(calib)
    tracker.step(3, [])
    with pytest.raises(ValueError):
        tracker.step(3, [])


def test_chain_total_cost_matches_edge_sum(calib):
    """Single-candidate stream: Eq.-style total equals the replayed edge sum."""
    cues = CueConfig(sigma_v=200.0, sigma_a=500.0, sigma_m=2.0, sigma_h=2.0)
    tracker = ViterbiTracker(cues, calib)
    xs = [1150.0, 1000.0, 820.0, 700.0]
    ys = [200.0, 190.0, 205.0, 212.0]
    observations = [make_obs(x, y) for x, y in zip(xs, ys)]
    feats = [observation_features(o, calib) for o in observations]
    emitted = []
    for t, obs in enumerate(observations):
        emitted += tracker.step(t, [obs])
    emitted += tracker.finalize()
    record = emitted[0]

    pos_l, pos_r = feats[0].left.pos.copy(), feats[0].right.pos.copy()
    vel_l = np.zeros(2)
    vel_r = np.zeros(2)
    total = 0.0
    for t in range(1, len(feats)):
        total += stereo_matching_cost(pos_l + vel_l, pos_r + vel_r, feats[t - 1], feats[t], cues)
        vel_l = 0.3 * (feats[t].left.pos - pos_l) + 0.7 * vel_l
        vel_r = 0.3 * (feats[t].right.pos - pos_r) + 0.7 * vel_r
        pos_l, pos_r = feats[t].left.pos.copy(), feats[t].right.pos.copy()
    assert record.total_cost == pytest.approx(total, rel=1e-12)
