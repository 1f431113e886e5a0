"""File format round-trip tests."""

import numpy as np
import pytest

from conftest import make_detection, make_obs
from trawltrack import io as tio
from trawltrack.tracking import TrackRecord, TrackStep


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    frame = rng.integers(0, 256, size=(37, 51)).astype(np.uint8)
    path = tmp_path / "f.pgm"
    tio.write_pgm(path, frame)
    assert np.array_equal(tio.read_pgm(path), frame)


def test_pgm_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6 nonsense")
    with pytest.raises(ValueError):
        tio.read_pgm(path)


def test_frame_dir_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    left = [rng.integers(0, 255, (16, 16)).astype(np.uint8) for _ in range(3)]
    right = [rng.integers(0, 255, (16, 16)).astype(np.uint8) for _ in range(3)]
    tio.write_frame_dir(tmp_path, left, right)
    ll, rr = tio.load_stereo_dir(tmp_path)
    assert all(np.array_equal(a, b) for a, b in zip(ll, left))
    assert all(np.array_equal(a, b) for a, b in zip(rr, right))
    with pytest.raises(FileNotFoundError):
        tio.load_frame_dir(tmp_path, "X_*.pgm")


def test_rle_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(20):
        mask = rng.random((13, 9)) < 0.4
        runs = tio.rle_encode(mask)
        assert np.array_equal(tio.rle_decode(runs, mask.shape), mask)
    assert tio.rle_encode(np.zeros((2, 2), dtype=bool)) == [4]
    assert tio.rle_encode(np.ones((2, 2), dtype=bool)) == [0, 4]


def test_detections_round_trip():
    dets = [[make_detection(30, 20, w=10, h=6)], []]
    data = tio.detections_to_dict(dets, 64, 48)
    loaded = tio.load_detection_masks(data)
    assert len(loaded) == 2 and len(loaded[0]) == 1 and loaded[1] == []
    box, mask = loaded[0][0]
    assert (box.x0, box.y0, box.w, box.h) == (26, 18, 10, 6)
    assert mask.all()


def test_tracks_round_trip():
    obs = make_obs(100, 50, disparity=20)
    record = TrackRecord(
        target_id=0,
        start_frame=0,
        end_frame=2,
        steps=[
            TrackStep(0, 0, (100.0, 50.0), (80.0, 50.0)),
            TrackStep(1, None, (90.0, 50.0), (70.0, 50.0)),
            TrackStep(2, 0, (80.0, 50.0), (60.0, 50.0)),
        ],
        total_cost=1.25,
        flags=("unterminated",),
        length_m=0.21,
    )
    data = tio.tracks_to_dict([record], {0: [obs], 1: [], 2: [obs]})
    loaded = tio.tracks_from_dict(data)[0]
    assert loaded.target_id == 0
    assert [s.obs_index for s in loaded.steps] == [0, None, 0]
    assert loaded.length_m == 0.21
    assert loaded.flags == ("unterminated",)


def test_lengths_csv_round_trip(tmp_path):
    records = [
        TrackRecord(0, 0, 3, [TrackStep(0, 0, (1, 2), (0, 2))], 0.0, ("x",), 0.25),
        TrackRecord(1, 0, 3, [], 0.0, (), None),
    ]
    path = tmp_path / "lengths.csv"
    tio.write_lengths_csv(path, records)
    loaded = tio.read_lengths_csv(path)
    assert loaded[0] == pytest.approx(0.25)
    assert loaded[1] is None


def test_dump_json_deterministic(tmp_path):
    payload = {"b": 1, "a": [1.5, 2.25], "c": {"z": None}}
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    tio.dump_json(payload, p1)
    tio.dump_json(payload, p2)
    assert p1.read_bytes() == p2.read_bytes()
