"""Independent oracles shared by unit and acceptance tests.

These deliberately avoid the library's polygon-clipping / analytic code
paths: IoU comes from point-in-box rasterization, suppression from a naive
quadratic sweep, and ARI from explicit pair enumeration.
"""

from __future__ import annotations

from fractions import Fraction
from itertools import combinations

import numpy as np

from herdid.geometry import Detection, OrientedBox


def point_in_box_mask(xs: np.ndarray, ys: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Boolean mask of points inside an oriented box (inclusive edges)."""
    dx = xs - box.cx
    dy = ys - box.cy
    ct, st = np.cos(box.theta), np.sin(box.theta)
    lx = ct * dx + st * dy
    ly = -st * dx + ct * dy
    return (np.abs(lx) <= box.w / 2) & (np.abs(ly) <= box.h / 2)


def rasterized_iou(a: OrientedBox, b: OrientedBox, n: int = 1000) -> float:
    """Point-in-box IoU estimate on an n x n grid over the joint AABB.

    float32 keeps the grid pass fast; its rounding shifts the inside test by
    far less than one grid cell, which itself is far inside the tolerances
    these oracle comparisons use.
    """
    corners = np.vstack([a.corners(), b.corners()])
    x0, y0 = corners.min(axis=0)
    x1, y1 = corners.max(axis=0)
    xs = np.linspace(x0, x1, n, dtype=np.float32)[None, :]
    ys = np.linspace(y0, y1, n, dtype=np.float32)[:, None]

    def inside(box: OrientedBox) -> np.ndarray:
        ct = np.float32(np.cos(box.theta))
        st = np.float32(np.sin(box.theta))
        dx = xs - np.float32(box.cx)
        dy = ys - np.float32(box.cy)
        lx = ct * dx + st * dy
        ly = ct * dy - st * dx
        np.abs(lx, out=lx)
        np.abs(ly, out=ly)
        return (lx <= box.w / 2) & (ly <= box.h / 2)

    in_a = inside(a)
    in_b = inside(b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def exhaustive_nms(dets: list[Detection], iou_fn, iou_thr: float,
                   conf_thr: float) -> list[Detection]:
    """Reference NMS: explicit loop over every kept/candidate pair."""
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, i))
    kept: list[int] = []
    for i in order:
        if dets[i].confidence < conf_thr:
            continue
        ok = True
        for j in kept:
            if dets[j].frame_index != dets[i].frame_index:
                continue
            if iou_fn(dets[i].box, dets[j].box) > iou_thr:
                ok = False
                break
        if ok:
            kept.append(i)
    return [dets[i] for i in kept]


def pair_counting_ari(labels_a, labels_b) -> float:
    """Hubert-Arabie ARI computed from explicit pair counts (exact)."""
    n = len(labels_a)
    assert n == len(labels_b) and n >= 2
    together_a = together_b = together_both = 0
    for i, j in combinations(range(n), 2):
        same_a = labels_a[i] == labels_a[j]
        same_b = labels_b[i] == labels_b[j]
        together_a += same_a
        together_b += same_b
        together_both += same_a and same_b
    total = Fraction(n * (n - 1), 2)
    expected = Fraction(together_a) * Fraction(together_b) / total
    max_index = Fraction(together_a + together_b, 2)
    if max_index == expected:
        return 1.0
    return float((Fraction(together_both) - expected) / (max_index - expected))


def set_partitions(items):
    """Yield every partition of a list (as tuples of label assignments).

    The first element joins each existing block of a sub-partition once, or
    opens a new block; counts follow the Bell numbers.
    """
    if not items:
        yield ()
        return
    if len(items) == 1:
        yield (0,)
        return
    for rest in set_partitions(items[1:]):
        n_blocks = max(rest) + 1
        for c in range(n_blocks + 1):
            yield (c,) + tuple(rest)


def random_boxes(rng: np.random.Generator, n: int, span: float = 40.0):
    """Sample n random well-formed oriented boxes for property tests."""
    out = []
    for _ in range(n):
        out.append(OrientedBox(
            cx=rng.uniform(-span, span),
            cy=rng.uniform(-span, span),
            w=rng.uniform(1.0, 25.0),
            h=rng.uniform(1.0, 25.0),
            theta=rng.uniform(-np.pi, np.pi),
        ))
    return out
