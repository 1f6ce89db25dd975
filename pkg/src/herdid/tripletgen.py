"""Contrastive training data from tracklets.

A tracklet's detections become a "positive" sample set of rotation-
normalised crops, enriched with small rotational augmentation. Batches pair
anchor/positive crops from one set against negatives drawn from sets of
other videos (which very likely show a different individual; the tests only
assert the video-disjointness contract).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import Crop, OrientedBox, extract_normalized_crop, load_crop, save_crop
from .tracking import Tracklet
from .util import rng_for

DEFAULT_MAX_ANGLE_DEG = 7.0
DEFAULT_AUG_PER_CROP = 2
DEFAULT_CROP_H = 40
DEFAULT_CROP_W = 96


@dataclass
class SampleSet:
    """All crops of one tracklet (originals plus augmented copies)."""

    tracklet_id: int
    video_id: str
    crops: list[Crop] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.crops)


@dataclass
class TripletBatch:
    """Aligned anchor/positive/negative crop lists with their provenance."""

    anchors: list[Crop]
    positives: list[Crop]
    negatives: list[Crop]
    anchor_tracklet_ids: list[int]
    negative_tracklet_ids: list[int]
    anchor_video_ids: list[str]
    negative_video_ids: list[str]

    def __len__(self) -> int:
        return len(self.anchors)


def _quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit levels crops are persisted at (PNG-faithful)."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def build_positive_set(tracklet: Tracklet, frames: Mapping[int, np.ndarray],
                       aug_per_crop: int = DEFAULT_AUG_PER_CROP,
                       max_angle_deg: float = DEFAULT_MAX_ANGLE_DEG,
                       rng_seed: int = 0,
                       out_h: int = DEFAULT_CROP_H,
                       out_w: int = DEFAULT_CROP_W,
                       quantize: bool = True) -> SampleSet:
    """Rotation-normalised crops for every detection of a tracklet.

    Each detection yields its straight crop followed by aug_per_crop
    augmented copies whose extraction angle is offset by Uniform(-max_angle,
    +max_angle) degrees; rotating the box before cropping avoids a second
    interpolation over the crop raster. Deterministic given rng_seed.

    Raises:
        KeyError: when ``frames`` lacks a detection's frame, naming it.
    """
    if aug_per_crop < 0:
        raise ValueError("aug_per_crop must be >= 0")
    rng = rng_for(rng_seed, "aug", tracklet.video_id, tracklet.tracklet_id)
    max_angle = math.radians(max_angle_deg)
    crops: list[Crop] = []
    for det in tracklet.detections:
        if det.frame_index not in frames:
            raise KeyError(f"no frame {det.frame_index} supplied for tracklet "
                           f"{tracklet.tracklet_id}")
        frame = frames[det.frame_index]
        crop = extract_normalized_crop(frame, det.box, out_h, out_w,
                                       frame_index=det.frame_index)
        if quantize:
            crop.pixels = _quantize(crop.pixels)
        crops.append(crop)
        for _ in range(aug_per_crop):
            delta = float(rng.uniform(-max_angle, max_angle))
            box = OrientedBox(det.box.cx, det.box.cy, det.box.w, det.box.h,
                              det.box.theta + delta)
            aug = extract_normalized_crop(frame, box, out_h, out_w,
                                          frame_index=det.frame_index)
            if quantize:
                aug.pixels = _quantize(aug.pixels)
            crops.append(aug)
    return SampleSet(tracklet_id=tracklet.tracklet_id,
                     video_id=tracklet.video_id, crops=crops)


def sample_triplet_batch(sets: Sequence[SampleSet], batch_size: int = 16,
                         rng_seed: int = 0) -> TripletBatch:
    """Assemble a batch of (anchor, positive, negative) crops.

    Per slot: an anchor set with at least two crops is chosen uniformly,
    anchor and positive are drawn from it without replacement, and the
    negative comes from a uniformly chosen set with a different video_id.
    Deterministic given rng_seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    videos = {s.video_id for s in sets}
    if len(videos) < 2:
        raise ValueError("triplet sampling needs sets from at least two videos")
    eligible = [i for i, s in enumerate(sets) if len(s.crops) >= 2]
    if not eligible:
        raise ValueError("no sample set has two or more crops")
    rng = rng_for(rng_seed, "triplets")
    batch = TripletBatch([], [], [], [], [], [], [])
    for _ in range(batch_size):
        while True:  # resample sets too small to give an anchor/positive pair
            anchor_set = sets[int(rng.integers(len(sets)))]
            if len(anchor_set.crops) >= 2:
                break
        a_idx, p_idx = rng.choice(len(anchor_set.crops), size=2, replace=False)
        while True:
            negative_set = sets[int(rng.integers(len(sets)))]
            if negative_set.video_id != anchor_set.video_id:
                break
        n_idx = int(rng.integers(len(negative_set.crops)))
        batch.anchors.append(anchor_set.crops[int(a_idx)])
        batch.positives.append(anchor_set.crops[int(p_idx)])
        batch.negatives.append(negative_set.crops[n_idx])
        batch.anchor_tracklet_ids.append(anchor_set.tracklet_id)
        batch.negative_tracklet_ids.append(negative_set.tracklet_id)
        batch.anchor_video_ids.append(anchor_set.video_id)
        batch.negative_video_ids.append(negative_set.video_id)
    return batch


def val_test_split(n_items: int, labels: Sequence | None = None,
                   rng_seed: int = 0,
                   val_fraction: float = 0.25) -> tuple[list[int], list[int]]:
    """1:3 validation/test index split, stratified by label when labelled.

    With labels=None the split is a single shuffled pool. Each stratum
    contributes at least one validation item once it has two or more
    members.
    """
    if labels is not None and len(labels) != n_items:
        raise ValueError("labels must match n_items")
    rng = rng_for(rng_seed, "valsplit")
    groups: dict = {}
    for i in range(n_items):
        key = labels[i] if labels is not None else 0
        groups.setdefault(key, []).append(i)
    val: list[int] = []
    test: list[int] = []
    for key in sorted(groups, key=repr):
        idxs = np.array(groups[key])
        rng.shuffle(idxs)
        if len(idxs) < 2:
            test.extend(int(i) for i in idxs)
            continue
        n_val = max(1, round(len(idxs) * val_fraction))
        val.extend(int(i) for i in idxs[:n_val])
        test.extend(int(i) for i in idxs[n_val:])
    return sorted(val), sorted(test)


def save_sample_set(sample_set: SampleSet, directory) -> None:
    """Persist a sample set as a directory of PNG crops plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, crop in enumerate(sample_set.crops):
        name = f"crop_{i:05d}.png"
        save_crop(crop, directory / name)
        names.append(name)
    manifest = {
        "tracklet_id": sample_set.tracklet_id,
        "video_id": sample_set.video_id,
        "crops": names,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def load_sample_set(directory) -> SampleSet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    crops = [load_crop(directory / name) for name in manifest["crops"]]
    return SampleSet(tracklet_id=manifest["tracklet_id"],
                     video_id=manifest["video_id"], crops=crops)
