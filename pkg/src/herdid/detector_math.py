"""Mathematical core of the oriented-box detector.

Covers the focal classification loss and its derivative, rotated anchor
grids over the P3-P7 pyramid levels, box-delta encoding/decoding against
anchors, and Average Precision evaluation with continuous (VOC-2012 style)
precision-recall integration. No backbone and no training loop live here;
detector outputs are simulated elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Detection, OrientedBox, rotated_iou_matrix, wrap_angle

PYRAMID_STRIDES = {"P3": 8, "P4": 16, "P5": 32, "P6": 64, "P7": 128}
DEFAULT_ANGLES = (-math.pi / 2, 0.0, math.pi / 2, math.pi)


@dataclass(frozen=True)
class FocalLossParams:
    """Focusing and balance settings for the classification loss."""

    gamma: float = 2.0
    alpha: float = 0.25
    loss_balance_lambda: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.loss_balance_lambda <= 0:
            raise ValueError("loss_balance_lambda must be > 0")


def focal_loss(p: float, y: int, params: FocalLossParams = FocalLossParams()) -> float:
    """Focal loss -alpha_t * (1 - p_t)^gamma * log(p_t) for a binary label.

    p is the predicted foreground probability, strictly inside (0, 1);
    p_t = p for y=1 and 1-p for y=0, alpha_t likewise.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be strictly inside (0, 1), got {p}")
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    p_t = p if y == 1 else 1.0 - p
    alpha_t = params.alpha if y == 1 else 1.0 - params.alpha
    return -alpha_t * (1.0 - p_t) ** params.gamma * math.log(p_t)


def focal_loss_grad(p: float, y: int,
                    params: FocalLossParams = FocalLossParams()) -> float:
    """Analytic d(focal_loss)/dp at (p, y)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be strictly inside (0, 1), got {p}")
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    p_t = p if y == 1 else 1.0 - p
    alpha_t = params.alpha if y == 1 else 1.0 - params.alpha
    gamma = params.gamma
    # d/dp_t of -alpha_t (1-p_t)^g log(p_t); the g * (...)**(g-1) term is
    # zero by convention when g == 0
    if gamma == 0.0:
        d_pt = -alpha_t / p_t
    else:
        d_pt = alpha_t * (gamma * (1.0 - p_t) ** (gamma - 1.0) * math.log(p_t)
                          - (1.0 - p_t) ** gamma / p_t)
    return d_pt if y == 1 else -d_pt


@dataclass(frozen=True)
class BoxDelta:
    """Regression target of a ground-truth box against an anchor."""

    dx: float
    dy: float
    dw: float
    dh: float
    dtheta: float


def encode_box(gt: OrientedBox, anchor: OrientedBox) -> BoxDelta:
    """Normalised-offset / log-ratio deltas, plus wrapped angle difference."""
    return BoxDelta(
        dx=(gt.cx - anchor.cx) / anchor.w,
        dy=(gt.cy - anchor.cy) / anchor.h,
        dw=math.log(gt.w / anchor.w),
        dh=math.log(gt.h / anchor.h),
        dtheta=wrap_angle(gt.theta - anchor.theta),
    )


def decode_box(delta: BoxDelta, anchor: OrientedBox) -> OrientedBox:
    """Exact inverse of encode_box."""
    return OrientedBox(
        cx=delta.dx * anchor.w + anchor.cx,
        cy=delta.dy * anchor.h + anchor.cy,
        w=anchor.w * math.exp(delta.dw),
        h=anchor.h * math.exp(delta.dh),
        theta=wrap_angle(anchor.theta + delta.dtheta),
    )


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor layout: per-level base sizes and the shared angle set."""

    base_sizes: Mapping[str, tuple[tuple[float, float], ...]] | None = None
    angles: tuple[float, ...] = DEFAULT_ANGLES
    size_scale: float = 4.0       # base anchor side = size_scale * stride
    aspect: float = 2.5           # w : h, torso-shaped by default
    scales_per_level: int = 3

    def sizes_for(self, level: str) -> tuple[tuple[float, float], ...]:
        if self.base_sizes is not None:
            return tuple(self.base_sizes[level])
        stride = PYRAMID_STRIDES[level]
        sizes = []
        for k in range(self.scales_per_level):
            side = self.size_scale * stride * 2.0 ** (k / 3.0)
            sizes.append((side * math.sqrt(self.aspect),
                          side / math.sqrt(self.aspect)))
        return tuple(sizes)


@dataclass
class AnchorGrid:
    """All anchors of one pyramid level over an image."""

    level: str
    stride: int
    base_sizes: tuple[tuple[float, float], ...]
    angles: tuple[float, ...]
    anchors: list[OrientedBox] = field(repr=False)

    @property
    def grid_cells(self) -> int:
        return len(self.anchors) // (len(self.base_sizes) * len(self.angles))


def generate_rotated_anchors(image_w: int, image_h: int,
                             config: AnchorConfig = AnchorConfig()) -> list[AnchorGrid]:
    """Rotated anchor grids for the five levels P3..P7.

    Each level lays a ceil(w/stride) x ceil(h/stride) grid of cells; every
    cell centre (i+0.5)*stride carries one anchor per (base size, angle)
    combination.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    if not config.angles:
        raise ValueError("anchor angle set must be non-empty")
    grids = []
    for level, stride in PYRAMID_STRIDES.items():
        sizes = config.sizes_for(level)
        if not sizes:
            raise ValueError(f"no base sizes configured for {level}")
        nx = math.ceil(image_w / stride)
        ny = math.ceil(image_h / stride)
        anchors = []
        for iy in range(ny):
            cy = (iy + 0.5) * stride
            for ix in range(nx):
                cx = (ix + 0.5) * stride
                for (w, h) in sizes:
                    for angle in config.angles:
                        anchors.append(OrientedBox(cx, cy, w, h, angle))
        grids.append(AnchorGrid(level=level, stride=stride, base_sizes=sizes,
                                angles=tuple(config.angles), anchors=anchors))
    return grids


def _match_predictions(preds: Sequence[Detection],
                       gts_by_image: Mapping[int, Sequence[OrientedBox]],
                       iou_thr: float):
    """Greedy confidence-ordered matching; returns per-pred TP flags."""
    order = sorted(range(len(preds)),
                   key=lambda i: (-preds[i].confidence, i))
    tp_flags = np.zeros(len(preds), dtype=bool)
    by_image: dict[int, list[int]] = {}
    for i in order:
        by_image.setdefault(preds[i].frame_index, []).append(i)
    for img, idxs in by_image.items():
        gts = list(gts_by_image.get(img, ()))
        if not gts:
            continue
        mat = rotated_iou_matrix([preds[i].box for i in idxs], gts)
        used: set[int] = set()
        for row, i in enumerate(idxs):  # idxs already in confidence order
            best_j = -1
            best_iou = -1.0
            for j in range(len(gts)):
                if j in used or mat[row, j] <= best_iou:
                    continue
                best_j, best_iou = j, mat[row, j]
            if best_j >= 0 and best_iou >= iou_thr:
                used.add(best_j)
                tp_flags[i] = True
    return order, tp_flags


def precision_recall_curve(preds: Sequence[Detection],
                           gts_by_image: Mapping[int, Sequence[OrientedBox]],
                           iou_thr: float):
    """Cumulative precision/recall arrays in descending-confidence order."""
    n_gts = sum(len(v) for v in gts_by_image.values())
    if n_gts == 0:
        raise ValueError("average precision is undefined without ground truths")
    order, tp_flags = _match_predictions(preds, gts_by_image, iou_thr)
    tps = np.cumsum([tp_flags[i] for i in order])
    fps = np.cumsum([not tp_flags[i] for i in order])
    precision = tps / np.maximum(tps + fps, 1)
    recall = tps / n_gts
    return recall, precision


def average_precision(preds: Sequence[Detection],
                      gts_by_image: Mapping[int, Sequence[OrientedBox]],
                      iou_thr: float) -> float:
    """Area under the PR curve with monotone precision interpolation.

    Predictions are matched greedily (highest confidence first) to the
    highest-IoU unmatched ground truth of their own image; a match requires
    IoU >= iou_thr. Integration is continuous over recall, with precision
    replaced by its running maximum from the right.
    """
    recall, precision = precision_recall_curve(preds, gts_by_image, iou_thr)
    if len(recall) == 0:
        return 0.0
    r = np.concatenate(([0.0], recall))
    p = np.concatenate(([1.0], precision))
    p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))


def ap_report(preds: Sequence[Detection],
              gts_by_image: Mapping[int, Sequence[OrientedBox]],
              iou_thr: float) -> dict:
    """JSON-ready AP summary including the raw PR curve points."""
    recall, precision = precision_recall_curve(preds, gts_by_image, iou_thr)
    return {
        "ap": average_precision(preds, gts_by_image, iou_thr),
        "iou_thr": iou_thr,
        "n_preds": len(preds),
        "n_gts": int(sum(len(v) for v in gts_by_image.values())),
        "pr_curve": [[float(r), float(p)] for r, p in zip(recall, precision)],
    }
