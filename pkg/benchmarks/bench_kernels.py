"""Benchmark the numba kernels against their pure-numpy fallbacks.

Usage:
    python benchmarks/bench_kernels.py [--repeats N]

Times each hot kernel on a realistic workload through both code paths and
prints the speedup. Works without numba too (the numba column is skipped).
Set HERDID_DISABLE_NUMBA=1 to confirm which path the library itself binds.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from herdid import _kernels


def _time(fn, repeats: int) -> float:
    fn()  # warmup (and JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _workloads():
    rng = np.random.default_rng(0)
    n_boxes = 300
    boxes_a = np.column_stack([
        rng.uniform(0, 600, n_boxes), rng.uniform(0, 400, n_boxes),
        rng.uniform(40, 160, n_boxes), rng.uniform(20, 70, n_boxes),
        rng.uniform(-np.pi, np.pi, n_boxes)])
    boxes_b = boxes_a[rng.permutation(n_boxes)]

    frame = rng.uniform(0, 1, (360, 640))
    pattern = rng.uniform(0, 1, (40, 96))

    conv_x = rng.uniform(0, 1, (8, 40, 96))
    conv_w = rng.normal(0, 0.1, (16, 8, 3, 3))
    conv_b = np.zeros(16)
    conv_g = rng.normal(0, 0.1, (16, 40, 96))

    crops = 64

    def iou_np():
        _kernels.iou_matrix_np(boxes_a, boxes_b)

    def crop_np():
        for i in range(crops):
            _kernels.warp_crop_np(frame, 320.0, 180.0, 150.0, 60.0,
                                  0.01 * i, 40, 96)

    def paste_np():
        canvas = frame.copy()
        for i in range(crops):
            _kernels.paste_pattern_np(canvas, pattern, 320.0, 180.0,
                                      150.0, 60.0, 0.01 * i)

    def conv_fwd_np():
        _kernels.conv3x3_forward_np(conv_x, conv_w, conv_b)

    def conv_bwd_np():
        _kernels.conv3x3_backward_np(conv_x, conv_w, conv_g)

    cases = [
        ("iou_matrix 300x300", iou_np, "iou_matrix_nb",
         lambda: _kernels.iou_matrix_nb(boxes_a, boxes_b)),
        (f"warp_crop x{crops}", crop_np, "warp_crop_nb",
         lambda: [_kernels.warp_crop_nb(frame, 320.0, 180.0, 150.0, 60.0,
                                        0.01 * i, 40, 96)
                  for i in range(crops)]),
        (f"paste_pattern x{crops}", paste_np, "paste_pattern_nb",
         lambda: [_kernels.paste_pattern_nb(frame.copy(), pattern, 320.0,
                                            180.0, 150.0, 60.0, 0.01 * i)
                  for i in range(crops)]),
        ("conv3x3 forward 8->16 @40x96", conv_fwd_np, "conv3x3_forward_nb",
         lambda: _kernels.conv3x3_forward_nb(conv_x, conv_w, conv_b)),
        ("conv3x3 backward 8->16 @40x96", conv_bwd_np, "conv3x3_backward_nb",
         lambda: _kernels.conv3x3_backward_nb(conv_x, conv_w, conv_g)),
    ]
    return cases


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"numba available: {_kernels.HAS_NUMBA} "
          f"(HERDID_DISABLE_NUMBA={'set' if _kernels.NUMBA_DISABLED else 'unset'})")
    header = f"{'kernel':34} {'numpy':>10} {'numba':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, np_fn, nb_name, nb_fn in _workloads():
        t_np = _time(np_fn, args.repeats)
        if _kernels.HAS_NUMBA and hasattr(_kernels, nb_name):
            t_nb = _time(nb_fn, args.repeats)
            print(f"{name:34} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms "
                  f"{t_np / t_nb:7.1f}x")
        else:
            print(f"{name:34} {t_np * 1e3:9.2f}ms {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
