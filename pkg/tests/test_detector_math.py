"""Focal loss, anchors, box deltas, and average precision."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdid.detector_math import (
    AnchorConfig,
    FocalLossParams,
    ap_report,
    average_precision,
    decode_box,
    encode_box,
    focal_loss,
    focal_loss_grad,
    generate_rotated_anchors,
)
from herdid.geometry import Detection, OrientedBox

from _oracles import random_boxes


class TestFocalLoss:
    def test_perfect_prediction_vanishes(self):
        params = FocalLossParams()
        losses = [focal_loss(1 - eps, 1, params) for eps in (1e-2, 1e-4, 1e-6)]
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-12

    def test_reference_value(self):
        # p=0.5, y=1, gamma=2, alpha=0.25 -> 0.25 * 0.25 * ln 2
        got = focal_loss(0.5, 1, FocalLossParams(gamma=2, alpha=0.25))
        assert got == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-12)

    def test_reduces_to_cross_entropy(self):
        params = FocalLossParams(gamma=0.0, alpha=1.0)
        for p in (0.1, 0.35, 0.9):
            assert focal_loss(p, 1, params) == pytest.approx(-math.log(p), rel=1e-12)
        params0 = FocalLossParams(gamma=0.0, alpha=0.0)
        for p in (0.1, 0.35, 0.9):
            assert focal_loss(p, 0, params0) == pytest.approx(-math.log(1 - p), rel=1e-12)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            focal_loss(0.0, 1)
        with pytest.raises(ValueError):
            focal_loss(1.0, 0)
        with pytest.raises(ValueError):
            focal_loss_grad(-0.5, 1)
        with pytest.raises(ValueError):
            focal_loss(0.5, 2)

    @pytest.mark.parametrize("y", [0, 1])
    @pytest.mark.parametrize("params", [
        FocalLossParams(),
        FocalLossParams(gamma=0.0, alpha=1.0),
        FocalLossParams(gamma=1.0, alpha=0.5),
        FocalLossParams(gamma=3.5, alpha=0.1),
    ])
    def test_grad_matches_finite_differences(self, y, params):
        step = 1e-6
        for p in np.arange(0.01, 0.995, 0.02):
            num = (focal_loss(p + step, y, params)
                   - focal_loss(p - step, y, params)) / (2 * step)
            ana = focal_loss_grad(p, y, params)
            assert ana == pytest.approx(num, rel=1e-4, abs=1e-9)

    def test_monotone_decreasing_in_p_t(self):
        params = FocalLossParams()
        grid = np.linspace(0.01, 0.99, 99)
        vals1 = [focal_loss(p, 1, params) for p in grid]
        assert all(a > b for a, b in zip(vals1, vals1[1:]))
        vals0 = [focal_loss(p, 0, params) for p in grid]
        assert all(a < b for a, b in zip(vals0, vals0[1:]))

    def test_param_validation(self):
        with pytest.raises(ValueError):
            FocalLossParams(gamma=-1)
        with pytest.raises(ValueError):
            FocalLossParams(alpha=1.5)
        with pytest.raises(ValueError):
            FocalLossParams(loss_balance_lambda=0)


class TestAnchors:
    def test_small_image_single_combo(self):
        cfg = AnchorConfig(base_sizes={lvl: ((32.0, 16.0),) for lvl in
                                       ("P3", "P4", "P5", "P6", "P7")},
                           angles=(0.0,))
        grids = generate_rotated_anchors(64, 64, cfg)
        assert [g.level for g in grids] == ["P3", "P4", "P5", "P6", "P7"]
        assert len(grids[0].anchors) == 64  # 8x8 cells at stride 8
        p7 = grids[-1]
        assert p7.stride == 128

    def test_p7_single_cell(self):
        cfg = AnchorConfig(base_sizes={lvl: ((64.0, 32.0),) for lvl in
                                       ("P3", "P4", "P5", "P6", "P7")},
                           angles=(0.0,))
        grids = generate_rotated_anchors(128, 128, cfg)
        assert len(grids[-1].anchors) == 1
        only = grids[-1].anchors[0]
        assert (only.cx, only.cy) == (64.0, 64.0)

    def test_hd_image_counts(self):
        cfg = AnchorConfig(angles=(0.0, math.pi / 4, math.pi / 2),
                           scales_per_level=3)
        grids = generate_rotated_anchors(1280, 720, cfg)
        p3 = grids[0]
        assert len(p3.anchors) == math.ceil(1280 / 8) * math.ceil(720 / 8) * 9
        assert len(p3.anchors) == 160 * 90 * 9

    def test_centres_on_stride_grid(self):
        grids = generate_rotated_anchors(80, 48)
        for grid in grids:
            for anchor in grid.anchors[:64]:
                assert (anchor.cx / grid.stride) % 1 == pytest.approx(0.5)
                assert (anchor.cy / grid.stride) % 1 == pytest.approx(0.5)
            combos = len(grid.base_sizes) * len(grid.angles)
            assert len(grid.anchors) == grid.grid_cells * combos

    def test_empty_config_errors(self):
        with pytest.raises(ValueError):
            generate_rotated_anchors(64, 64, AnchorConfig(angles=()))
        with pytest.raises(ValueError):
            generate_rotated_anchors(
                64, 64,
                AnchorConfig(base_sizes={lvl: () for lvl in
                                         ("P3", "P4", "P5", "P6", "P7")}))

    def test_default_angles_cover_four_directions(self):
        grids = generate_rotated_anchors(16, 16)
        angles = sorted({a.theta for a in grids[0].anchors})
        assert angles == pytest.approx([-math.pi, -math.pi / 2, 0.0, math.pi / 2])


class TestBoxDeltas:
    def test_identical_boxes_zero_delta(self):
        box = OrientedBox(10, 20, 8, 4, 0.3)
        delta = encode_box(box, box)
        assert (delta.dx, delta.dy, delta.dw, delta.dh, delta.dtheta) == \
            (0.0, 0.0, 0.0, 0.0, 0.0)

    def test_worked_example(self):
        anchor = OrientedBox(0, 0, 10, 10, 0)
        gt = OrientedBox(5, 0, 20, 10, math.pi / 4)
        delta = encode_box(gt, anchor)
        assert delta.dx == pytest.approx(0.5)
        assert delta.dy == pytest.approx(0.0)
        assert delta.dw == pytest.approx(math.log(2))
        assert delta.dh == pytest.approx(0.0)
        assert delta.dtheta == pytest.approx(math.pi / 4)

    def test_roundtrip_thousand_pairs(self):
        rng = np.random.default_rng(12)
        boxes = random_boxes(rng, 2000, span=200.0)
        for gt, anchor in zip(boxes[::2], boxes[1::2]):
            back = decode_box(encode_box(gt, anchor), anchor)
            assert abs(back.cx - gt.cx) <= 1e-9
            assert abs(back.cy - gt.cy) <= 1e-9
            assert abs(back.w - gt.w) <= 1e-9
            assert abs(back.h - gt.h) <= 1e-9
            assert abs(back.theta - gt.theta) <= 1e-9

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_property(self, data):
        def one_box():
            return OrientedBox(
                cx=data.draw(st.floats(-100, 100)),
                cy=data.draw(st.floats(-100, 100)),
                w=data.draw(st.floats(0.5, 50)),
                h=data.draw(st.floats(0.5, 50)),
                theta=data.draw(st.floats(-math.pi, math.pi - 1e-9)),
            )
        gt, anchor = one_box(), one_box()
        back = decode_box(encode_box(gt, anchor), anchor)
        assert abs(back.cx - gt.cx) <= 1e-9
        assert abs(back.theta - gt.theta) <= 1e-9


def _det(box, conf, frame=0):
    return Detection(box, conf, frame)


class TestAveragePrecision:
    def test_perfect_predictions(self):
        rng = np.random.default_rng(1)
        gts = {0: random_boxes(rng, 4, span=50.0), 1: random_boxes(rng, 3, span=50.0)}
        preds = [_det(b, 1.0, img) for img, boxes in gts.items() for b in boxes]
        assert average_precision(preds, gts, 0.7) == 1.0

    def test_no_matches(self):
        gts = {0: [OrientedBox(0, 0, 4, 2, 0)]}
        preds = [_det(OrientedBox(100, 100, 4, 2, 0), 0.9, 0)]
        assert average_precision(preds, gts, 0.7) == 0.0

    def test_two_gt_one_fp(self):
        a = OrientedBox(0, 0, 4, 2, 0)
        b = OrientedBox(50, 50, 4, 2, 0)
        gts = {0: [a, b]}
        preds = [_det(a, 0.9, 0), _det(OrientedBox(100, 0, 4, 2, 0), 0.8, 0)]
        assert average_precision(preds, gts, 0.7) == pytest.approx(0.5)

    def test_invariant_to_monotone_confidence_rescale(self):
        rng = np.random.default_rng(8)
        gts = {0: random_boxes(rng, 6, span=30.0)}
        preds = []
        for k, gt in enumerate(gts[0]):
            jit = OrientedBox(gt.cx + rng.uniform(-2, 2), gt.cy + rng.uniform(-2, 2),
                              gt.w, gt.h, gt.theta)
            preds.append(_det(jit, float(rng.uniform(0.3, 0.9)), 0))
        preds.append(_det(OrientedBox(500, 500, 5, 5, 0), 0.55, 0))
        base = average_precision(preds, gts, 0.5)
        rescaled = [Detection(d.box, d.confidence ** 3 * 0.7 + 0.1, d.frame_index)
                    for d in preds]
        assert average_precision(rescaled, gts, 0.5) == pytest.approx(base, abs=1e-12)

    def test_duplicates_cannot_raise_ap(self):
        rng = np.random.default_rng(9)
        gts = {0: random_boxes(rng, 5, span=40.0)}
        preds = [_det(b, float(c), 0)
                 for b, c in zip(gts[0], rng.uniform(0.5, 1.0, 5))]
        base = average_precision(preds, gts, 0.7)
        dup = preds + [Detection(d.box, d.confidence * 0.5, d.frame_index)
                       for d in preds]
        assert average_precision(dup, gts, 0.7) <= base + 1e-12

    def test_no_ground_truth_errors(self):
        with pytest.raises(ValueError):
            average_precision([], {}, 0.7)

    def test_matching_is_per_image(self):
        box = OrientedBox(0, 0, 4, 2, 0)
        gts = {0: [box]}
        # same box but on image 1: must not match the image-0 ground truth
        preds = [_det(box, 0.9, 1)]
        assert average_precision(preds, gts, 0.7) == 0.0

    def test_report_schema(self):
        box = OrientedBox(0, 0, 4, 2, 0)
        report = ap_report([_det(box, 0.9, 0)], {0: [box]}, 0.7)
        assert set(report) == {"ap", "iou_thr", "n_preds", "n_gts", "pr_curve"}
        assert report["ap"] == 1.0
        assert report["n_preds"] == 1
        assert report["n_gts"] == 1
        assert report["pr_curve"] == [[1.0, 1.0]]
