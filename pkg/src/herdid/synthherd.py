"""Deterministic synthetic herd: coat patterns, walkway videos, detector noise.

Everything derives from (scenario, seed): patterns are smoothed seeded
noise, animals translate along fixed walkway lanes with per-frame heading
jitter, and ground truth carries oriented boxes, identities, and tracklets
in the same schema the tracking stage emits. A configurable noise model
turns ground truth into simulated detector output so the full pipeline can
run and be scored without any real imagery.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import _kernels
from .geometry import Detection, OrientedBox, wrap_angle
from .tracking import Tracklet, sample_frames
from .util import rng_for

MAX_HERD = 10_000
DARK_LEVEL = 0.3
LIGHT_LEVEL = 0.7
MIN_REGION_FRACTION = 0.05


@dataclass
class SynthIdentity:
    """One individual: a canonical torso texture plus its enrollability."""

    identity_id: int
    pattern: np.ndarray  # (H, W) floats in [0, 1], right-facing torso
    enrollable: bool


@dataclass
class SynthScenario:
    """Walkway recording setup; all randomness keys off rng_seed."""

    n_individuals: int = 20
    n_videos: int = 60
    frames_per_video: int = 165
    video_fps: float = 30.0
    sample_rate_hz: float = 5.0
    animals_per_video: tuple[int, int] = (1, 3)
    frame_h: int = 360
    frame_w: int = 640
    body_w: float = 150.0
    body_h: float = 60.0
    speed_px_s: tuple[float, float] = (45.0, 70.0)
    heading_noise_deg: float = 2.0
    occlusion_prob: float = 0.0
    include_clipped: bool = False
    background: float = 0.7
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("n_individuals", "n_videos", "frames_per_video",
                     "frame_h", "frame_w"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.animals_per_video
        if not (1 <= lo <= hi):
            raise ValueError("animals_per_video must be a positive (lo, hi) range")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")

    def sampled_frames(self) -> list[int]:
        return sample_frames(self.video_fps, self.frames_per_video,
                             self.sample_rate_hz)

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["animals_per_video"] = list(self.animals_per_video)
        out["speed_px_s"] = list(self.speed_px_s)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SynthScenario":
        obj = dict(obj)
        if "animals_per_video" in obj:
            obj["animals_per_video"] = tuple(obj["animals_per_video"])
        if "speed_px_s" in obj:
            obj["speed_px_s"] = tuple(obj["speed_px_s"])
        return cls(**obj)


@dataclass
class DetectorNoise:
    """Perturbation model emulating a high-AP oriented-box detector."""

    center_sigma: float = 2.0        # px
    size_sigma: float = 0.03         # log-scale relative jitter
    angle_sigma: float = 0.03        # radians
    miss_rate: float = 0.02
    false_positive_rate: float = 0.05  # expected FPs per frame
    tp_confidence: tuple[float, float] = (0.6, 1.0)
    fp_confidence: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must be in [0, 1]")
        if self.false_positive_rate < 0:
            raise ValueError("false_positive_rate must be >= 0")

    @classmethod
    def zero(cls) -> "DetectorNoise":
        """Perfect detector: detections equal ground truth at confidence 1."""
        return cls(center_sigma=0.0, size_sigma=0.0, angle_sigma=0.0,
                   miss_rate=0.0, false_positive_rate=0.0,
                   tp_confidence=(1.0, 1.0))

    def scaled(self, factor: float) -> "DetectorNoise":
        """Same model with all geometric jitters multiplied by factor."""
        return replace(self, center_sigma=self.center_sigma * factor,
                       size_sigma=self.size_sigma * factor,
                       angle_sigma=self.angle_sigma * factor)

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["tp_confidence"] = list(self.tp_confidence)
        out["fp_confidence"] = list(self.fp_confidence)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorNoise":
        obj = dict(obj)
        if "tp_confidence" in obj:
            obj["tp_confidence"] = tuple(obj["tp_confidence"])
        if "fp_confidence" in obj:
            obj["fp_confidence"] = tuple(obj["fp_confidence"])
        return cls(**obj)


@dataclass
class GtInstance:
    identity_id: int
    box: OrientedBox
    clipped: bool = False


@dataclass
class GroundTruth:
    """Per-video truth: instances by frame, tracklets, and their identities."""

    video_id: str
    frame_indices: list[int]
    instances: dict[int, list[GtInstance]] = field(default_factory=dict)
    tracklets: list[Tracklet] = field(default_factory=list)
    tracklet_identity: dict[int, int] = field(default_factory=dict)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(int(3 * sigma), 1)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, radius, mode="reflect")
    out = np.apply_along_axis(lambda r: np.convolve(r, kernel, "valid"), 1, padded)
    out = np.apply_along_axis(lambda c: np.convolve(c, kernel, "valid"), 0, out)
    return out


def _blob_pattern(rng: np.random.Generator, h: int, w: int,
                  blur_sigma: float = 3.0, gain: float = 1.6) -> np.ndarray:
    noise = rng.normal(size=(h, w))
    smooth = _gaussian_blur(noise, blur_sigma)
    smooth = (smooth - smooth.mean()) / max(smooth.std(), 1e-9)
    return 0.5 + 0.5 * np.tanh(gain * smooth)


def _is_enrollable_pattern(pattern: np.ndarray) -> bool:
    dark = np.mean(pattern < DARK_LEVEL)
    light = np.mean(pattern > LIGHT_LEVEL)
    return dark >= MIN_REGION_FRACTION and light >= MIN_REGION_FRACTION


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    fa = (a - a.mean()).ravel()
    fb = (b - b.mean()).ravel()
    denom = np.linalg.norm(fa) * np.linalg.norm(fb)
    if denom == 0:
        return 1.0
    return float(fa @ fb / denom)


def generate_herd(n: int, rng_seed: int = 0, pattern_h: int = 40,
                  pattern_w: int = 96, n_unenrollable: int = 0) -> list[SynthIdentity]:
    """n distinct enrollable coat patterns (plus optional all-black animals).

    Patterns are thresholded-smoothly seeded noise; any pair whose
    normalised cross-correlation reaches 0.9 is regenerated so identities
    stay visually distinct.
    """
    if n < 1:
        raise ValueError("need at least one identity")
    if n > MAX_HERD:
        raise ValueError(f"pattern space exhausted beyond {MAX_HERD} identities")
    herd: list[SynthIdentity] = []
    for i in range(n):
        pattern = None
        for attempt in range(64):
            rng = rng_for(rng_seed, "pattern", i, attempt)
            candidate = _blob_pattern(rng, pattern_h, pattern_w)
            if not _is_enrollable_pattern(candidate):
                continue
            if all(abs(_ncc(candidate, other.pattern)) < 0.9 for other in herd):
                pattern = candidate
                break
        if pattern is None:
            raise RuntimeError(f"could not generate a distinct pattern for id {i}")
        herd.append(SynthIdentity(identity_id=i, pattern=pattern, enrollable=True))
    for j in range(n_unenrollable):
        dark = np.full((pattern_h, pattern_w), 0.06)
        herd.append(SynthIdentity(identity_id=n + j, pattern=dark,
                                  enrollable=False))
    return herd


@dataclass
class _Walk:
    identity_id: int
    lane_y: float
    direction: int          # +1 walks toward +x, -1 toward -x
    speed: float            # px / s
    x_start: float
    headings: np.ndarray    # theta per sampled frame


def _plan_video(herd: list[SynthIdentity], scenario: SynthScenario,
                video_index: int) -> list[_Walk]:
    rng = rng_for(scenario.rng_seed, "video", video_index)
    lo, hi = scenario.animals_per_video
    n_lanes = hi
    n_animals = min(int(rng.integers(lo, hi + 1)), len(herd))
    ids = rng.choice([a.identity_id for a in herd], size=n_animals, replace=False)
    lanes = rng.choice(n_lanes, size=n_animals, replace=False)
    sampled = scenario.sampled_frames()
    walks = []
    half_extent = 0.5 * math.hypot(scenario.body_w, scenario.body_h)
    for identity_id, lane in zip(ids, lanes):
        direction = 1 if lane % 2 == 0 else -1
        speed = float(rng.uniform(*scenario.speed_px_s))
        margin = half_extent + 4.0
        offset = float(rng.uniform(0.0, 60.0))
        x_start = margin + offset if direction > 0 \
            else scenario.frame_w - margin - offset
        base = 0.0 if direction > 0 else math.pi
        noise = np.deg2rad(scenario.heading_noise_deg)
        headings = base + rng.uniform(-noise, noise, size=len(sampled))
        lane_y = scenario.frame_h * (lane + 1) / (n_lanes + 1)
        walks.append(_Walk(int(identity_id), lane_y, direction, speed,
                           x_start, headings))
    return walks


def _walk_box(walk: _Walk, scenario: SynthScenario, sample_pos: int,
              frame_index: int) -> OrientedBox:
    t = frame_index / scenario.video_fps
    x = walk.x_start + walk.direction * walk.speed * t
    theta = wrap_angle(float(walk.headings[sample_pos]))
    return OrientedBox(x, walk.lane_y, scenario.body_w, scenario.body_h, theta)


def _box_fully_inside(box: OrientedBox, frame_w: int, frame_h: int) -> bool:
    half_x = 0.5 * (box.w * abs(math.cos(box.theta))
                    + box.h * abs(math.sin(box.theta)))
    half_y = 0.5 * (box.w * abs(math.sin(box.theta))
                    + box.h * abs(math.cos(box.theta)))
    return (box.cx - half_x >= 0 and box.cx + half_x < frame_w
            and box.cy - half_y >= 0 and box.cy + half_y < frame_h)


def video_ground_truth(herd: list[SynthIdentity], scenario: SynthScenario,
                       video_index: int) -> GroundTruth:
    """Ground truth for one video without rendering any pixels."""
    walks = _plan_video(herd, scenario, video_index)
    sampled = scenario.sampled_frames()
    occ_rng = rng_for(scenario.rng_seed, "occlusion", video_index)
    video_id = f"video{video_index:04d}"
    gt = GroundTruth(video_id=video_id, frame_indices=list(sampled))

    runs: dict[int, list[list[Detection]]] = {}
    run_open: dict[int, bool] = {}
    for pos, frame_index in enumerate(sampled):
        frame_instances: list[GtInstance] = []
        for walk in walks:
            box = _walk_box(walk, scenario, pos, frame_index)
            inside = _box_fully_inside(box, scenario.frame_w, scenario.frame_h)
            centre_inside = (0 <= box.cx < scenario.frame_w
                             and 0 <= box.cy < scenario.frame_h)
            occluded = (scenario.occlusion_prob > 0
                        and occ_rng.random() < scenario.occlusion_prob)
            visible = centre_inside and (inside or scenario.include_clipped) \
                and not occluded
            if visible:
                frame_instances.append(GtInstance(walk.identity_id, box,
                                                  clipped=not inside))
                det = Detection(box, 1.0, frame_index)
                if run_open.get(walk.identity_id):
                    runs[walk.identity_id][-1].append(det)
                else:
                    runs.setdefault(walk.identity_id, []).append([det])
                    run_open[walk.identity_id] = True
            else:
                run_open[walk.identity_id] = False
        gt.instances[frame_index] = frame_instances

    next_id = video_index * 1000
    for walk in walks:
        for run in runs.get(walk.identity_id, []):
            tracklet = Tracklet(next_id, video_id, run, closed=True)
            gt.tracklets.append(tracklet)
            gt.tracklet_identity[next_id] = walk.identity_id
            next_id += 1
    return gt


def render_video(herd: list[SynthIdentity], scenario: SynthScenario,
                 video_index: int):
    """Render sampled frames plus ground truth for one video.

    Returns (frames, gt) where frames maps frame_index to an (H, W) float
    image; only the sampled frame indices are materialised.
    """
    gt = video_ground_truth(herd, scenario, video_index)
    patterns = {a.identity_id: a.pattern for a in herd}
    missing = {inst.identity_id for insts in gt.instances.values()
               for inst in insts} - set(patterns)
    if missing:
        raise ValueError(f"identities {sorted(missing)} not present in herd")
    frames: dict[int, np.ndarray] = {}
    for frame_index in gt.frame_indices:
        frame = np.full((scenario.frame_h, scenario.frame_w),
                        scenario.background, dtype=np.float64)
        for inst in gt.instances[frame_index]:
            box = inst.box
            _kernels.paste_pattern(frame, patterns[inst.identity_id],
                                   box.cx, box.cy, box.w, box.h, box.theta)
        frames[frame_index] = frame
    return frames, gt


@dataclass
class StillSample:
    """A single-animal evaluation frame rendered on its own small canvas."""

    identity_id: int
    frame: np.ndarray
    box: OrientedBox


def iter_stills(herd: list[SynthIdentity], n_per_identity: int,
                scenario: SynthScenario, rng_seed: int) -> Iterator[StillSample]:
    """Yield single-animal stills at random pose, independent of the videos."""
    canvas = 2 * (int(0.5 * math.hypot(scenario.body_w, scenario.body_h)) + 26)
    patterns = {a.identity_id: a.pattern for a in herd}
    for animal in herd:
        for k in range(n_per_identity):
            rng = rng_for(rng_seed, "still", animal.identity_id, k)
            cx = canvas / 2 + rng.uniform(-18, 18)
            cy = canvas / 2 + rng.uniform(-18, 18)
            theta = rng.uniform(-math.pi, math.pi)
            box = OrientedBox(cx, cy, scenario.body_w, scenario.body_h, theta)
            frame = np.full((canvas, canvas), scenario.background)
            _kernels.paste_pattern(frame, patterns[animal.identity_id],
                                   box.cx, box.cy, box.w, box.h, box.theta)
            yield StillSample(animal.identity_id, frame, box)


def jitter_box(box: OrientedBox, noise: DetectorNoise,
               rng: np.random.Generator, frame_w: int, frame_h: int) -> OrientedBox:
    """One perturbed copy of a ground-truth box, centre clamped into frame."""
    cx = box.cx + rng.normal(0.0, noise.center_sigma) if noise.center_sigma else box.cx
    cy = box.cy + rng.normal(0.0, noise.center_sigma) if noise.center_sigma else box.cy
    w = box.w * math.exp(rng.normal(0.0, noise.size_sigma)) if noise.size_sigma else box.w
    h = box.h * math.exp(rng.normal(0.0, noise.size_sigma)) if noise.size_sigma else box.h
    theta = box.theta + (rng.normal(0.0, noise.angle_sigma) if noise.angle_sigma else 0.0)
    return OrientedBox(float(np.clip(cx, 0, frame_w - 1e-6)),
                       float(np.clip(cy, 0, frame_h - 1e-6)), w, h, theta)


def jitter_detections(gt: GroundTruth, noise: DetectorNoise, rng_seed: int,
                      frame_w: int, frame_h: int) -> dict[int, list[Detection]]:
    """Simulated detector output: perturbed truth, misses, false positives.

    True-positive confidences are drawn above the false-positive range so
    that TPs stochastically dominate FPs.
    """
    rng = rng_for(rng_seed, "jitter", gt.video_id)
    out: dict[int, list[Detection]] = {}
    for frame_index in gt.frame_indices:
        dets: list[Detection] = []
        for inst in gt.instances[frame_index]:
            if noise.miss_rate > 0 and rng.random() < noise.miss_rate:
                continue
            box = jitter_box(inst.box, noise, rng, frame_w, frame_h)
            conf = float(rng.uniform(*noise.tp_confidence))
            dets.append(Detection(box, conf, frame_index))
        n_fp = int(rng.poisson(noise.false_positive_rate)) \
            if noise.false_positive_rate > 0 else 0
        for _ in range(n_fp):
            w = float(rng.uniform(0.6, 1.3) * 100.0)
            h = float(rng.uniform(0.6, 1.3) * 40.0)
            box = OrientedBox(float(rng.uniform(10, frame_w - 10)),
                              float(rng.uniform(10, frame_h - 10)),
                              w, h, float(rng.uniform(-math.pi, math.pi)))
            conf = float(rng.uniform(*noise.fp_confidence))
            dets.append(Detection(box, conf, frame_index))
        out[frame_index] = dets
    return out


def export_dataset(herd: list[SynthIdentity], scenario: SynthScenario,
                   out_dir, save_frames: bool = True,
                   noise: DetectorNoise | None = None) -> None:
    """Write the dataset in the ingestion layout.

    Layout: PNG frame directories per video, ground truth as the tracking
    JSON-lines schema plus identity labels, simulated detections (under the
    given noise model) as JSON lines, the coat patterns, and a meta header.
    """
    from PIL import Image

    noise = noise if noise is not None else DetectorNoise()
    out_dir = Path(out_dir)
    (out_dir / "gt").mkdir(parents=True, exist_ok=True)
    (out_dir / "detections").mkdir(parents=True, exist_ok=True)
    meta = {
        "scenario": scenario.to_json(),
        "noise": noise.to_json(),
        "identities": [{"identity_id": a.identity_id, "enrollable": a.enrollable}
                       for a in herd],
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    np.savez_compressed(out_dir / "patterns.npz",
                        **{str(a.identity_id): a.pattern for a in herd})
    for video_index in range(scenario.n_videos):
        frames, gt = render_video(herd, scenario, video_index)
        if save_frames:
            vdir = out_dir / "videos" / gt.video_id
            vdir.mkdir(parents=True, exist_ok=True)
            for frame_index, frame in frames.items():
                img = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
                Image.fromarray(img).save(vdir / f"frame_{frame_index:06d}.png")
        lines = []
        for tracklet in gt.tracklets:
            row = tracklet.to_json()
            row["identity_id"] = gt.tracklet_identity[tracklet.tracklet_id]
            lines.append(json.dumps(row, sort_keys=True))
        (out_dir / "gt" / f"{gt.video_id}.jsonl").write_text(
            "\n".join(lines) + ("\n" if lines else ""))
        dets = jitter_detections(gt, noise, scenario.rng_seed,
                                 scenario.frame_w, scenario.frame_h)
        det_lines = [json.dumps(d.to_json(), sort_keys=True)
                     for fi in sorted(dets) for d in dets[fi]]
        (out_dir / "detections" / f"{gt.video_id}.jsonl").write_text(
            "\n".join(det_lines) + ("\n" if det_lines else ""))
