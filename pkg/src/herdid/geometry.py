"""Oriented bounding-box algebra.

Boxes are rotated rectangles (cx, cy, w, h, theta). theta is the head
direction of the animal, measured counter-clockwise from the image +x axis
and normalised to [-pi, pi); w runs along the head direction. All
operations here are pure functions over immutable inputs and safe to call
concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Normalise an angle to [-pi, pi)."""
    return (theta + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle: centre, width (along head direction), height, angle."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    def corners(self) -> np.ndarray:
        """(4, 2) corners, counter-clockwise, starting at the front-left.

        Front = the +w/2 face the head points at; left = the +h/2 side in
        the box frame. The corner centroid equals (cx, cy).
        """
        return corners(self)

    def to_json(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h,
                "theta": self.theta}

    @classmethod
    def from_json(cls, obj: dict) -> "OrientedBox":
        return cls(obj["cx"], obj["cy"], obj["w"], obj["h"], obj["theta"])


@dataclass(frozen=True)
class Detection:
    """A scored detector output on one frame."""

    box: OrientedBox
    confidence: float
    frame_index: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")

    def to_json(self) -> dict:
        return {"box": self.box.to_json(), "confidence": self.confidence,
                "frame_index": self.frame_index}

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(OrientedBox.from_json(obj["box"]), obj["confidence"],
                   obj["frame_index"])


@dataclass
class Crop:
    """Rotation-normalised ROI: head direction mapped to +x (right facing)."""

    pixels: np.ndarray  # (H, W) or (H, W, C), floats in [0, 1]
    source_box: OrientedBox
    frame_index: int


def boxes_to_array(boxes) -> np.ndarray:
    """Stack OrientedBox instances into an (N, 5) float array."""
    return np.array([(b.cx, b.cy, b.w, b.h, b.theta) for b in boxes],
                    dtype=np.float64).reshape(-1, 5)


def corners(box: OrientedBox) -> np.ndarray:
    arr = np.array([[box.cx, box.cy, box.w, box.h, box.theta]])
    return _kernels.box_corners_array(arr)[0]


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection-over-union of two oriented boxes.

    The intersection polygon comes from Sutherland-Hodgman clipping of the
    two convex quads, its area from the shoelace formula. Symmetric in the
    arguments; intersection areas below 1e-12 count as empty.
    """
    inter = float(_kernels.quad_clip_area(corners(a), corners(b)))
    if inter < 1e-12:
        return 0.0
    return inter / (a.area + b.area - inter)


def rotated_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise rotated IoU between two sequences of OrientedBox."""
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.zeros((len(boxes_a), len(boxes_b)))
    return _kernels.iou_matrix(boxes_to_array(boxes_a), boxes_to_array(boxes_b))


def rotated_nms(dets, iou_thr: float, conf_thr: float) -> list[Detection]:
    """Greedy rotated non-maximum suppression.

    Detections below conf_thr are dropped. The rest are visited in order of
    descending confidence (ties broken by input position) and kept unless
    their IoU with an already-kept detection of the same frame exceeds
    iou_thr. Suppression only applies within a frame_index group.
    """
    if not 0.0 <= iou_thr <= 1.0:
        raise ValueError(f"iou_thr must be in [0, 1], got {iou_thr}")
    if not 0.0 <= conf_thr <= 1.0:
        raise ValueError(f"conf_thr must be in [0, 1], got {conf_thr}")
    survivors = [(i, d) for i, d in enumerate(dets) if d.confidence >= conf_thr]
    survivors.sort(key=lambda item: (-item[1].confidence, item[0]))
    kept: list[Detection] = []
    kept_by_frame: dict[int, list[Detection]] = {}
    for _, det in survivors:
        group = kept_by_frame.setdefault(det.frame_index, [])
        suppressed = False
        for other in group:
            if rotated_iou(det.box, other.box) > iou_thr:
                suppressed = True
                break
        if not suppressed:
            group.append(det)
            kept.append(det)
    return kept


def extract_normalized_crop(frame: np.ndarray, box: OrientedBox,
                            out_h: int, out_w: int,
                            frame_index: int = 0) -> Crop:
    """Resample the interior of an oriented box into a fixed-size crop.

    The box-local +x axis (head direction) maps to crop columns, so the
    result is a right-facing view. Sampling is inverse-affine bilinear;
    pixels falling outside the frame read as 0.

    Args:
        frame: (H, W) or (H, W, C) float image.
        box: region to extract; its centre must lie inside the frame.
        out_h / out_w: crop size in pixels, both > 0.
        frame_index: recorded on the returned Crop.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"crop size must be positive, got {out_h}x{out_w}")
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim not in (2, 3):
        raise ValueError("frame must be (H, W) or (H, W, C)")
    fh, fw = frame.shape[:2]
    if not (0 <= box.cx < fw and 0 <= box.cy < fh):
        raise ValueError(f"box centre ({box.cx}, {box.cy}) outside {fw}x{fh} frame")
    if frame.ndim == 2:
        pixels = _kernels.warp_crop(frame, box.cx, box.cy, box.w, box.h,
                                    box.theta, out_h, out_w)
    else:
        planes = [_kernels.warp_crop(np.ascontiguousarray(frame[:, :, c]),
                                     box.cx, box.cy, box.w, box.h, box.theta,
                                     out_h, out_w)
                  for c in range(frame.shape[2])]
        pixels = np.stack(planes, axis=-1)
    return Crop(pixels=pixels, source_box=box, frame_index=frame_index)


def save_crop(crop: Crop, png_path) -> None:
    """Write a crop as an 8-bit PNG plus a JSON sidecar with its provenance."""
    from PIL import Image

    png_path = Path(png_path)
    arr = np.clip(crop.pixels, 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(png_path)
    sidecar = {"source_box": crop.source_box.to_json(),
               "frame_index": crop.frame_index}
    png_path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_crop(png_path) -> Crop:
    """Read back a crop written by save_crop."""
    from PIL import Image

    png_path = Path(png_path)
    data = np.asarray(Image.open(png_path), dtype=np.float64) / 255.0
    sidecar = json.loads(png_path.with_suffix(".json").read_text())
    return Crop(pixels=data,
                source_box=OrientedBox.from_json(sidecar["source_box"]),
                frame_index=sidecar["frame_index"])
