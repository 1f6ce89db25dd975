"""Frame sampling and nearest-centrepoint tracklet linking."""

import pytest

from herdid.geometry import Detection, OrientedBox
from herdid.tracking import (
    Tracklet,
    TrackingConfig,
    link_detections,
    sample_frames,
    select_training_tracklets,
    tracklets_from_jsonl,
    tracklets_to_jsonl,
)


def _det(x, y, frame, conf=1.0, w=20.0, h=8.0):
    return Detection(OrientedBox(x, y, w, h, 0.0), conf, frame)


class TestSampleFrames:
    def test_thirty_fps_at_five_hz(self):
        idx = sample_frames(30.0, 165, 5.0)
        assert idx == list(range(0, 163, 6))
        assert len(idx) == 28

    def test_rate_equals_fps(self):
        assert sample_frames(25.0, 10, 25.0) == list(range(10))

    def test_single_frame(self):
        assert sample_frames(30.0, 1, 5.0) == [0]

    def test_non_integer_step(self):
        assert sample_frames(30.0, 30, 4.0) == [0, 7, 15, 22]

    def test_errors(self):
        with pytest.raises(ValueError):
            sample_frames(30.0, 100, 0.0)
        with pytest.raises(ValueError):
            sample_frames(30.0, 100, -2.0)
        with pytest.raises(ValueError):
            sample_frames(30.0, 100, 31.0)

    def test_empty_video(self):
        assert sample_frames(30.0, 0, 5.0) == []


class TestLinkDetections:
    def test_single_animal_single_tracklet(self):
        frames = [[_det(100 + 5 * t, 50, t)] for t in range(10)]
        tracklets = link_detections(frames, TrackingConfig(gate_dist=30))
        assert len(tracklets) == 1
        assert len(tracklets[0]) == 10
        assert tracklets[0].closed

    def test_two_parallel_animals(self):
        frames = [[_det(100 + 5 * t, 50, t), _det(100 + 5 * t, 450, t)]
                  for t in range(8)]
        tracklets = link_detections(frames, TrackingConfig(gate_dist=100))
        assert len(tracklets) == 2
        ys = sorted({d.box.cy for t in tracklets for d in t.detections})
        assert ys == [50, 450]
        for t in tracklets:
            assert len({d.box.cy for t_ in [t] for d in t_.detections}) == 1

    def test_jump_beyond_gate_splits(self):
        gate = 40.0
        xs = [100, 110, 120, 120 + 2 * gate, 120 + 2 * gate + 10]
        frames = [[_det(x, 50, t)] for t, x in enumerate(xs)]
        tracklets = link_detections(frames, TrackingConfig(gate_dist=gate))
        assert len(tracklets) == 2
        assert [len(t) for t in tracklets] == [3, 2]

    def test_partition_property(self):
        import numpy as np

        rng = np.random.default_rng(0)
        frames = []
        for t in range(12):
            frames.append([_det(float(rng.uniform(0, 600)),
                                float(rng.uniform(0, 300)), t)
                           for _ in range(rng.integers(0, 5))])
        total = sum(len(f) for f in frames)
        tracklets = link_detections(frames, TrackingConfig(gate_dist=80))
        assert sum(len(t) for t in tracklets) == total
        seen = set()
        for tr in tracklets:
            for d in tr.detections:
                key = id(d)
                assert key not in seen
                seen.add(key)

    def test_missed_frame_tolerance(self):
        frames = [[_det(100, 50, 0)], [], [_det(104, 50, 2)]]
        strict = link_detections(frames, TrackingConfig(gate_dist=30,
                                                        max_missed_frames=0))
        assert len(strict) == 2
        lenient = link_detections(frames, TrackingConfig(gate_dist=30,
                                                         max_missed_frames=1))
        assert len(lenient) == 1
        assert len(lenient[0]) == 2

    def test_adaptive_gate_default(self):
        # box diagonal ~21.5 -> gate ~10.8; an 8 px step links, 30 px splits
        frames_near = [[_det(100, 50, 0)], [_det(108, 50, 1)]]
        assert len(link_detections(frames_near, TrackingConfig())) == 1
        frames_far = [[_det(100, 50, 0)], [_det(130, 50, 1)]]
        assert len(link_detections(frames_far, TrackingConfig())) == 2

    def test_deterministic_tie_break(self):
        # two heads equidistant from one detection: lower tracklet id wins
        frames = [
            [_det(90, 50, 0), _det(110, 50, 0)],
            [_det(100, 50, 1)],
        ]
        tracklets = link_detections(frames, TrackingConfig(gate_dist=15))
        by_id = {t.tracklet_id: t for t in tracklets}
        assert len(by_id[0]) == 2
        assert len(by_id[1]) == 1

    def test_empty_input(self):
        assert link_detections([], TrackingConfig(gate_dist=10)) == []

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrackingConfig(sample_rate_hz=0)
        with pytest.raises(ValueError):
            TrackingConfig(gate_dist=-5)
        with pytest.raises(ValueError):
            TrackingConfig(max_missed_frames=-1)


class TestTrackletType:
    def test_requires_detections(self):
        with pytest.raises(ValueError):
            Tracklet(0, "v", [])

    def test_requires_increasing_frames(self):
        with pytest.raises(ValueError):
            Tracklet(0, "v", [_det(0, 0, 5), _det(1, 0, 5)])

    def test_min_length_filter(self):
        t1 = Tracklet(0, "v", [_det(0, 0, 0)])
        t3 = Tracklet(1, "v", [_det(0, 0, 0), _det(1, 0, 1), _det(2, 0, 2)])
        assert select_training_tracklets([t1, t3]) == [t3]

    def test_jsonl_roundtrip(self):
        tracklets = [
            Tracklet(3, "video007", [_det(1, 2, 0, 0.9), _det(3, 4, 6, 0.8)]),
            Tracklet(4, "video007", [_det(9, 9, 12, 0.7)]),
        ]
        text = tracklets_to_jsonl(tracklets)
        back = tracklets_from_jsonl(text)
        assert len(back) == 2
        assert back[0].tracklet_id == 3
        assert back[0].video_id == "video007"
        assert back[0].detections == tracklets[0].detections
