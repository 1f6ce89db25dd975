"""Tracking-by-detection: frame sampling and nearest-centrepoint linking.

Linking is sequential within one video (it carries tracker state); separate
videos share nothing and may be processed in parallel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .geometry import Detection, OrientedBox


@dataclass
class TrackingConfig:
    """Linker settings.

    gate_dist is the maximum centre distance joining two detections in
    neighbouring sampled frames; None selects an adaptive gate of half the
    mean box diagonal of the current frame. A tracklet that goes unmatched
    for more than max_missed_frames sampled steps is closed.
    """

    sample_rate_hz: float = 5.0
    gate_dist: float | None = None
    max_missed_frames: int = 0

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be > 0")
        if self.gate_dist is not None and self.gate_dist <= 0:
            raise ValueError("gate_dist must be > 0")
        if self.max_missed_frames < 0:
            raise ValueError("max_missed_frames must be >= 0")


@dataclass
class Tracklet:
    """Ordered single-video detections of one (unknown) individual."""

    tracklet_id: int
    video_id: str
    detections: list[Detection] = field(default_factory=list)
    closed: bool = False

    def __post_init__(self):
        if not self.detections:
            raise ValueError("a tracklet needs at least one detection")
        frames = [d.frame_index for d in self.detections]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.detections)

    @property
    def centers(self) -> list[tuple[float, float]]:
        return [(d.box.cx, d.box.cy) for d in self.detections]

    def to_json(self) -> dict:
        return {
            "tracklet_id": self.tracklet_id,
            "video_id": self.video_id,
            "detections": [d.to_json() for d in self.detections],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Tracklet":
        return cls(
            tracklet_id=obj["tracklet_id"],
            video_id=obj["video_id"],
            detections=[Detection.from_json(d) for d in obj["detections"]],
            closed=True,
        )


def sample_frames(video_fps: float, n_frames: int, rate_hz: float) -> list[int]:
    """Frame indices when decimating an n_frames video to rate_hz.

    Index i of the sampled stream maps to floor(i * fps / rate); indices are
    ascending and deduplicated, stopping before n_frames.
    """
    if rate_hz <= 0:
        raise ValueError("rate_hz must be > 0")
    if rate_hz > video_fps:
        raise ValueError("rate_hz must not exceed the video frame rate")
    if n_frames <= 0:
        return []
    out = []
    i = 0
    while True:
        idx = math.floor(i * video_fps / rate_hz)
        if idx >= n_frames:
            break
        if not out or idx != out[-1]:
            out.append(idx)
        i += 1
    return out


def _adaptive_gate(frame_dets: list[Detection]) -> float:
    diag = [math.hypot(d.box.w, d.box.h) for d in frame_dets]
    return 0.5 * (sum(diag) / len(diag))


def link_detections(frames: list[list[Detection]], cfg: TrackingConfig,
                    video_id: str = "", start_id: int = 0) -> list[Tracklet]:
    """Link per-frame detections into tracklets by nearest centrepoints.

    At each sampled frame, open tracklet heads and detections are matched
    greedily in ascending centre-distance order (a mutual-nearest sweep);
    pairs beyond the gate are rejected, leftover detections open new
    tracklets, and tracklets missing for more than max_missed_frames steps
    close. Distance ties break on (tracklet_id, detection index), so output
    is deterministic for a given input ordering.
    """
    tracklets: list[Tracklet] = []
    open_heads: list[dict] = []  # {"tracklet": Tracklet, "missed": int}
    next_id = start_id

    for frame_dets in frames:
        gate = cfg.gate_dist
        if gate is None and frame_dets:
            gate = _adaptive_gate(frame_dets)

        pairs = []
        for ti, head in enumerate(open_heads):
            last = head["tracklet"].detections[-1].box
            for di, det in enumerate(frame_dets):
                dist = math.hypot(det.box.cx - last.cx, det.box.cy - last.cy)
                if dist <= gate:
                    pairs.append((dist, head["tracklet"].tracklet_id, di, ti))
        pairs.sort()

        matched_heads: set[int] = set()
        matched_dets: set[int] = set()
        for _, _, di, ti in pairs:
            if ti in matched_heads or di in matched_dets:
                continue
            matched_heads.add(ti)
            matched_dets.add(di)
            open_heads[ti]["tracklet"].detections.append(frame_dets[di])
            open_heads[ti]["missed"] = 0

        still_open = []
        for ti, head in enumerate(open_heads):
            if ti in matched_heads:
                still_open.append(head)
                continue
            head["missed"] += 1
            if head["missed"] > cfg.max_missed_frames:
                head["tracklet"].closed = True
            else:
                still_open.append(head)
        open_heads = still_open

        for di, det in enumerate(frame_dets):
            if di in matched_dets:
                continue
            tracklet = Tracklet(next_id, video_id, [det])
            next_id += 1
            tracklets.append(tracklet)
            open_heads.append({"tracklet": tracklet, "missed": 0})

    for head in open_heads:
        head["tracklet"].closed = True
    return tracklets


def select_training_tracklets(tracklets: list[Tracklet],
                              min_length: int = 3) -> list[Tracklet]:
    """Drop tracklets too short to supply positive pairs plus a holdout."""
    return [t for t in tracklets if len(t) >= min_length]


def tracklets_to_jsonl(tracklets: list[Tracklet]) -> str:
    return "".join(json.dumps(t.to_json(), sort_keys=True) + "\n"
                   for t in tracklets)


def tracklets_from_jsonl(text: str) -> list[Tracklet]:
    return [Tracklet.from_json(json.loads(line))
            for line in text.splitlines() if line.strip()]
