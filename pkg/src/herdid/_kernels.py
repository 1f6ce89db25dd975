"""Hot numeric kernels: numba-accelerated with a pure-numpy fallback.

Every kernel exists twice: a ``*_np`` reference implementation written in
vectorised numpy (or plain Python where vectorisation does not apply) and,
when numba is importable, an ``@njit`` version compiled from scalar loops.
The public names (``quad_clip_area``, ``iou_matrix``, ``warp_crop``,
``paste_pattern``, ``conv3x3_forward``, ...) are bound to one of the two at
import time.

Set ``HERDID_DISABLE_NUMBA=1`` to force the numpy path even when numba is
installed. ``benchmarks/bench_kernels.py`` times both paths side by side.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("HERDID_DISABLE_NUMBA", "0").strip().lower()
NUMBA_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled via HERDID_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        """No-op decorator standing in for numba.njit."""
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap


# ---------------------------------------------------------------------------
# Convex quad intersection (Sutherland-Hodgman) and IoU
# ---------------------------------------------------------------------------

def box_corners_array(boxes: np.ndarray) -> np.ndarray:
    """Corners of (N, 5) boxes given as (cx, cy, w, h, theta) rows.

    Returns (N, 4, 2) counter-clockwise corners starting at the front-left
    corner (+w/2, +h/2 in the box frame).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h, theta = (boxes[:, i] for i in range(5))
    local = np.empty((boxes.shape[0], 4, 2))
    local[:, 0, 0] = w / 2
    local[:, 0, 1] = h / 2
    local[:, 1, 0] = -w / 2
    local[:, 1, 1] = h / 2
    local[:, 2, 0] = -w / 2
    local[:, 2, 1] = -h / 2
    local[:, 3, 0] = w / 2
    local[:, 3, 1] = -h / 2
    ct, st = np.cos(theta), np.sin(theta)
    out = np.empty_like(local)
    out[..., 0] = cx[:, None] + ct[:, None] * local[..., 0] - st[:, None] * local[..., 1]
    out[..., 1] = cy[:, None] + st[:, None] * local[..., 0] + ct[:, None] * local[..., 1]
    return out


def quad_clip_area_np(quad_a: np.ndarray, quad_b: np.ndarray) -> float:
    """Area of the intersection of two convex CCW quads (pure Python)."""
    cur = [(float(p[0]), float(p[1])) for p in quad_a]
    for e in range(4):
        if not cur:
            return 0.0
        ex, ey = quad_b[e]
        dx = quad_b[(e + 1) % 4][0] - ex
        dy = quad_b[(e + 1) % 4][1] - ey
        nxt = []
        prev = cur[-1]
        side_prev = dx * (prev[1] - ey) - dy * (prev[0] - ex)
        for pt in cur:
            side = dx * (pt[1] - ey) - dy * (pt[0] - ex)
            if side >= 0.0:
                if side_prev < 0.0:
                    t = side_prev / (side_prev - side)
                    nxt.append((prev[0] + t * (pt[0] - prev[0]),
                                prev[1] + t * (pt[1] - prev[1])))
                nxt.append(pt)
            elif side_prev >= 0.0:
                t = side_prev / (side_prev - side)
                nxt.append((prev[0] + t * (pt[0] - prev[0]),
                            prev[1] + t * (pt[1] - prev[1])))
            prev, side_prev = pt, side
        cur = nxt
    if len(cur) < 3:
        return 0.0
    area = 0.0
    for i in range(len(cur)):
        x0, y0 = cur[i]
        x1, y1 = cur[(i + 1) % len(cur)]
        area += x0 * y1 - x1 * y0
    return 0.5 * area


def iou_matrix_np(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise rotated IoU for (N, 5) x (M, 5) box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    ca = box_corners_array(boxes_a)
    cb = box_corners_array(boxes_b)
    area_a = boxes_a[:, 2] * boxes_a[:, 3]
    area_b = boxes_b[:, 2] * boxes_b[:, 3]
    lo_a, hi_a = ca.min(axis=1), ca.max(axis=1)
    lo_b, hi_b = cb.min(axis=1), cb.max(axis=1)
    out = np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
    for i in range(boxes_a.shape[0]):
        for j in range(boxes_b.shape[0]):
            if (hi_a[i, 0] < lo_b[j, 0] or hi_b[j, 0] < lo_a[i, 0]
                    or hi_a[i, 1] < lo_b[j, 1] or hi_b[j, 1] < lo_a[i, 1]):
                continue
            inter = quad_clip_area_np(ca[i], cb[j])
            if inter < 1e-12:
                continue
            out[i, j] = inter / (area_a[i] + area_b[j] - inter)
    return out


@njit(cache=True)
def _quad_clip_area_nb(quad_a, quad_b):  # pragma: no cover - numba path
    cur = np.empty((16, 2))
    nxt = np.empty((16, 2))
    for i in range(4):
        cur[i, 0] = quad_a[i, 0]
        cur[i, 1] = quad_a[i, 1]
    n_cur = 4
    for e in range(4):
        if n_cur == 0:
            return 0.0
        ex = quad_b[e, 0]
        ey = quad_b[e, 1]
        dx = quad_b[(e + 1) % 4, 0] - ex
        dy = quad_b[(e + 1) % 4, 1] - ey
        n_nxt = 0
        px = cur[n_cur - 1, 0]
        py = cur[n_cur - 1, 1]
        side_prev = dx * (py - ey) - dy * (px - ex)
        for i in range(n_cur):
            qx = cur[i, 0]
            qy = cur[i, 1]
            side = dx * (qy - ey) - dy * (qx - ex)
            if side >= 0.0:
                if side_prev < 0.0:
                    t = side_prev / (side_prev - side)
                    nxt[n_nxt, 0] = px + t * (qx - px)
                    nxt[n_nxt, 1] = py + t * (qy - py)
                    n_nxt += 1
                nxt[n_nxt, 0] = qx
                nxt[n_nxt, 1] = qy
                n_nxt += 1
            elif side_prev >= 0.0:
                t = side_prev / (side_prev - side)
                nxt[n_nxt, 0] = px + t * (qx - px)
                nxt[n_nxt, 1] = py + t * (qy - py)
                n_nxt += 1
            px = qx
            py = qy
            side_prev = side
        for i in range(n_nxt):
            cur[i, 0] = nxt[i, 0]
            cur[i, 1] = nxt[i, 1]
        n_cur = n_nxt
    if n_cur < 3:
        return 0.0
    area = 0.0
    for i in range(n_cur):
        j = (i + 1) % n_cur
        area += cur[i, 0] * cur[j, 1] - cur[j, 0] * cur[i, 1]
    return 0.5 * area


@njit(cache=True)
def _corners_nb(box, out):  # pragma: no cover - numba path
    cx, cy, w, h, theta = box[0], box[1], box[2], box[3], box[4]
    ct = np.cos(theta)
    st = np.sin(theta)
    lx = np.array((w / 2, -w / 2, -w / 2, w / 2))
    ly = np.array((h / 2, h / 2, -h / 2, -h / 2))
    for i in range(4):
        out[i, 0] = cx + ct * lx[i] - st * ly[i]
        out[i, 1] = cy + st * lx[i] + ct * ly[i]


@njit(cache=True)
def _iou_matrix_nb(boxes_a, boxes_b):  # pragma: no cover - numba path
    n = boxes_a.shape[0]
    m = boxes_b.shape[0]
    ca = np.empty((n, 4, 2))
    cb = np.empty((m, 4, 2))
    for i in range(n):
        _corners_nb(boxes_a[i], ca[i])
    for j in range(m):
        _corners_nb(boxes_b[j], cb[j])
    out = np.zeros((n, m))
    for i in range(n):
        area_a = boxes_a[i, 2] * boxes_a[i, 3]
        ax0 = min(ca[i, 0, 0], min(ca[i, 1, 0], min(ca[i, 2, 0], ca[i, 3, 0])))
        ax1 = max(ca[i, 0, 0], max(ca[i, 1, 0], max(ca[i, 2, 0], ca[i, 3, 0])))
        ay0 = min(ca[i, 0, 1], min(ca[i, 1, 1], min(ca[i, 2, 1], ca[i, 3, 1])))
        ay1 = max(ca[i, 0, 1], max(ca[i, 1, 1], max(ca[i, 2, 1], ca[i, 3, 1])))
        for j in range(m):
            bx0 = min(cb[j, 0, 0], min(cb[j, 1, 0], min(cb[j, 2, 0], cb[j, 3, 0])))
            bx1 = max(cb[j, 0, 0], max(cb[j, 1, 0], max(cb[j, 2, 0], cb[j, 3, 0])))
            by0 = min(cb[j, 0, 1], min(cb[j, 1, 1], min(cb[j, 2, 1], cb[j, 3, 1])))
            by1 = max(cb[j, 0, 1], max(cb[j, 1, 1], max(cb[j, 2, 1], cb[j, 3, 1])))
            if ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0:
                continue
            inter = _quad_clip_area_nb(ca[i], cb[j])
            if inter < 1e-12:
                continue
            area_b = boxes_b[j, 2] * boxes_b[j, 3]
            out[i, j] = inter / (area_a + area_b - inter)
    return out


def iou_matrix_nb(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    return _iou_matrix_nb(np.ascontiguousarray(boxes_a, dtype=np.float64),
                          np.ascontiguousarray(boxes_b, dtype=np.float64))


def quad_clip_area_nb(quad_a: np.ndarray, quad_b: np.ndarray) -> float:
    return _quad_clip_area_nb(np.ascontiguousarray(quad_a, dtype=np.float64),
                              np.ascontiguousarray(quad_b, dtype=np.float64))


# ---------------------------------------------------------------------------
# Bilinear warps: oriented-box crop extraction and pattern pasting
# ---------------------------------------------------------------------------

def warp_crop_np(frame: np.ndarray, cx: float, cy: float, w: float, h: float,
                 theta: float, out_h: int, out_w: int) -> np.ndarray:
    """Sample the interior of an oriented box into an (out_h, out_w) image.

    Inverse-affine bilinear sampling; points outside the frame read as 0.
    """
    fh, fw = frame.shape
    ct, st = np.cos(theta), np.sin(theta)
    lx = ((np.arange(out_w) + 0.5) / out_w - 0.5) * w
    ly = ((np.arange(out_h) + 0.5) / out_h - 0.5) * h
    x = cx + ct * lx[None, :] - st * ly[:, None]
    y = cy + st * lx[None, :] + ct * ly[:, None]
    # 1-pixel zero border implements zero padding; neighbour indices are
    # clamped into the padded array so far-outside samples resolve to 0.
    padded = np.zeros((fh + 2, fw + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = frame
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    ix0 = np.clip(x0 + 1, 0, fw + 1)
    ix1 = np.clip(x0 + 2, 0, fw + 1)
    iy0 = np.clip(y0 + 1, 0, fh + 1)
    iy1 = np.clip(y0 + 2, 0, fh + 1)
    v00 = padded[iy0, ix0]
    v01 = padded[iy0, ix1]
    v10 = padded[iy1, ix0]
    v11 = padded[iy1, ix1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


@njit(cache=True)
def _warp_crop_nb(frame, cx, cy, w, h, theta, out):  # pragma: no cover
    fh, fw = frame.shape
    oh, ow = out.shape
    ct = np.cos(theta)
    st = np.sin(theta)
    for i in range(oh):
        ly = ((i + 0.5) / oh - 0.5) * h
        for j in range(ow):
            lx = ((j + 0.5) / ow - 0.5) * w
            x = cx + ct * lx - st * ly
            y = cy + st * lx + ct * ly
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            v = 0.0
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= fh:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= fw:
                        continue
                    wx = fx if dx == 1 else 1.0 - fx
                    v += frame[yy, xx] * wy * wx
            out[i, j] = v


def warp_crop_nb(frame, cx, cy, w, h, theta, out_h, out_w):
    out = np.empty((out_h, out_w), dtype=np.float64)
    _warp_crop_nb(np.ascontiguousarray(frame, dtype=np.float64),
                  float(cx), float(cy), float(w), float(h), float(theta), out)
    return out


def paste_pattern_np(frame: np.ndarray, pattern: np.ndarray, cx: float,
                     cy: float, w: float, h: float, theta: float) -> None:
    """Render ``pattern`` into ``frame`` under an oriented box, in place.

    Frame pixels inside the box are replaced by edge-clamped bilinear samples
    of the pattern; the mapping is the inverse of warp_crop.
    """
    fh, fw = frame.shape
    ph, pw = pattern.shape
    ct, st = np.cos(theta), np.sin(theta)
    half = 0.5 * np.hypot(w, h)
    x0 = max(int(np.floor(cx - half)), 0)
    x1 = min(int(np.ceil(cx + half)) + 1, fw)
    y0 = max(int(np.floor(cy - half)), 0)
    y1 = min(int(np.ceil(cy + half)) + 1, fh)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    lx = ct * dx + st * dy
    ly = -st * dx + ct * dy
    inside = (np.abs(lx) <= w / 2) & (np.abs(ly) <= h / 2)
    if not inside.any():
        return
    u = (lx / w + 0.5) * pw - 0.5
    v = (ly / h + 0.5) * ph - 0.5
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    iu0 = np.clip(u0, 0, pw - 1)
    iu1 = np.clip(u0 + 1, 0, pw - 1)
    iv0 = np.clip(v0, 0, ph - 1)
    iv1 = np.clip(v0 + 1, 0, ph - 1)
    top = pattern[iv0, iu0] * (1 - fu) + pattern[iv0, iu1] * fu
    bot = pattern[iv1, iu0] * (1 - fu) + pattern[iv1, iu1] * fu
    val = top * (1 - fv) + bot * fv
    region = frame[y0:y1, x0:x1]
    region[inside] = val[inside]


@njit(cache=True)
def _paste_pattern_nb(frame, pattern, cx, cy, w, h, theta):  # pragma: no cover
    fh, fw = frame.shape
    ph, pw = pattern.shape
    ct = np.cos(theta)
    st = np.sin(theta)
    half = 0.5 * np.sqrt(w * w + h * h)
    x0 = max(int(np.floor(cx - half)), 0)
    x1 = min(int(np.ceil(cx + half)) + 1, fw)
    y0 = max(int(np.floor(cy - half)), 0)
    y1 = min(int(np.ceil(cy + half)) + 1, fh)
    for y in range(y0, y1):
        dy = y - cy
        for x in range(x0, x1):
            dx = x - cx
            lx = ct * dx + st * dy
            ly = -st * dx + ct * dy
            if lx < -w / 2 or lx > w / 2 or ly < -h / 2 or ly > h / 2:
                continue
            u = (lx / w + 0.5) * pw - 0.5
            v = (ly / h + 0.5) * ph - 0.5
            u0 = int(np.floor(u))
            v0 = int(np.floor(v))
            fu = u - u0
            fv = v - v0
            iu0 = min(max(u0, 0), pw - 1)
            iu1 = min(max(u0 + 1, 0), pw - 1)
            iv0 = min(max(v0, 0), ph - 1)
            iv1 = min(max(v0 + 1, 0), ph - 1)
            top = pattern[iv0, iu0] * (1 - fu) + pattern[iv0, iu1] * fu
            bot = pattern[iv1, iu0] * (1 - fu) + pattern[iv1, iu1] * fu
            frame[y, x] = top * (1 - fv) + bot * fv


def paste_pattern_nb(frame, pattern, cx, cy, w, h, theta):
    _paste_pattern_nb(frame, np.ascontiguousarray(pattern, dtype=np.float64),
                      float(cx), float(cy), float(w), float(h), float(theta))


# ---------------------------------------------------------------------------
# 3x3 same-padding convolution and 2x2 average pooling (conv extractor)
# ---------------------------------------------------------------------------

def conv3x3_forward_np(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (C, H, W), w (F, C, 3, 3), b (F) -> (F, H, W), zero padded."""
    c, h_dim, w_dim = x.shape
    f = w.shape[0]
    xp = np.zeros((c, h_dim + 2, w_dim + 2))
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((c, 9, h_dim, w_dim))
    for di in range(3):
        for dj in range(3):
            cols[:, di * 3 + dj] = xp[:, di:di + h_dim, dj:dj + w_dim]
    out = np.tensordot(w.reshape(f, c * 9), cols.reshape(c * 9, h_dim * w_dim), axes=1)
    return out.reshape(f, h_dim, w_dim) + b[:, None, None]


def conv3x3_backward_np(x, w, gout):
    """Gradients of conv3x3_forward_np wrt (x, w, b) given gout (F, H, W)."""
    c, h_dim, w_dim = x.shape
    f = w.shape[0]
    xp = np.zeros((c, h_dim + 2, w_dim + 2))
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((c, 9, h_dim * w_dim))
    for di in range(3):
        for dj in range(3):
            cols[:, di * 3 + dj] = xp[:, di:di + h_dim, dj:dj + w_dim].reshape(c, -1)
    g2 = gout.reshape(f, -1)
    gw = (g2 @ cols.reshape(c * 9, -1).T).reshape(f, c, 3, 3)
    gb = g2.sum(axis=1)
    gxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            wk = w[:, :, di, dj]  # (F, C)
            gxp[:, di:di + h_dim, dj:dj + w_dim] += np.tensordot(wk.T, gout, axes=1)
    return gxp[:, 1:-1, 1:-1], gw, gb


@njit(cache=True)
def _conv3x3_forward_nb(x, w, b, out):  # pragma: no cover - numba path
    c, h_dim, w_dim = x.shape
    f = w.shape[0]
    for k in range(f):
        for i in range(h_dim):
            for j in range(w_dim):
                acc = b[k]
                for ch in range(c):
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h_dim:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= w_dim:
                                continue
                            acc += w[k, ch, di, dj] * x[ch, ii, jj]
                out[k, i, j] = acc


@njit(cache=True)
def _conv3x3_backward_nb(x, w, gout, gx, gw, gb):  # pragma: no cover
    c, h_dim, w_dim = x.shape
    f = w.shape[0]
    for k in range(f):
        for i in range(h_dim):
            for j in range(w_dim):
                g = gout[k, i, j]
                gb[k] += g
                for ch in range(c):
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h_dim:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= w_dim:
                                continue
                            gw[k, ch, di, dj] += g * x[ch, ii, jj]
                            gx[ch, ii, jj] += g * w[k, ch, di, dj]


def conv3x3_forward_nb(x, w, b):
    f = w.shape[0]
    out = np.empty((f, x.shape[1], x.shape[2]))
    _conv3x3_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w),
                        np.ascontiguousarray(b), out)
    return out


def conv3x3_backward_nb(x, w, gout):
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = np.zeros(w.shape[0])
    _conv3x3_backward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w),
                         np.ascontiguousarray(gout), gx, gw, gb)
    return gx, gw, gb


def avgpool2_forward(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling of (C, H, W); H and W must be even."""
    c, h_dim, w_dim = x.shape
    return x.reshape(c, h_dim // 2, 2, w_dim // 2, 2).mean(axis=(2, 4))


def avgpool2_backward(gout: np.ndarray) -> np.ndarray:
    """Distribute pooled gradients back over each 2x2 window."""
    c, h2, w2 = gout.shape
    g = np.repeat(np.repeat(gout, 2, axis=1), 2, axis=2)
    return g * 0.25


# ---------------------------------------------------------------------------
# Public bindings
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    quad_clip_area = quad_clip_area_nb
    iou_matrix = iou_matrix_nb
    warp_crop = warp_crop_nb
    paste_pattern = paste_pattern_nb
else:
    quad_clip_area = quad_clip_area_np
    iou_matrix = iou_matrix_np
    warp_crop = warp_crop_np
    paste_pattern = paste_pattern_np

# The im2col + BLAS formulation beats the scalar-loop jit for convolution at
# these channel counts (see benchmarks/bench_kernels.py), so the numpy path
# is the production binding on both configurations.
conv3x3_forward = conv3x3_forward_np
conv3x3_backward = conv3x3_backward_np
