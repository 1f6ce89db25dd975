"""Acceptance gate: one test per release criterion, at pinned tolerances.

Run with ``pytest tests/test_acceptance.py -s`` to see the PASS/FAIL line
each criterion prints. The end-to-end benchmark (20 identities, 60 videos,
default config) runs twice so the determinism criterion can compare bytes.
"""

import json
import math
import time

import numpy as np
import pytest

from herdid.clustering import adjusted_rand_index, assign, fit_gmm
from herdid.detector_math import (
    FocalLossParams,
    average_precision,
    decode_box,
    encode_box,
    focal_loss,
    focal_loss_grad,
)
from herdid.embedder import (
    EmbedderConfig,
    TrainConfig,
    batch_loss_and_grads,
    init_model,
)
from herdid.geometry import Detection, OrientedBox, rotated_iou
from herdid.pipeline import PipelineConfig, run_pipeline
from herdid.synthherd import (
    DetectorNoise,
    SynthScenario,
    generate_herd,
    jitter_detections,
    video_ground_truth,
)
from herdid.tracking import TrackingConfig, link_detections

from _oracles import (
    pair_counting_ari,
    random_boxes,
    rasterized_iou,
    set_partitions,
)

BENCH_SEED = 1
BENCH_RUNTIME_LIMIT_S = 600.0


def _verdict(name: str, ok: bool, detail: str) -> None:
    print(f"[acceptance] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    """Two full benchmark runs with the same seed, in separate directories."""
    runs = []
    for tag in ("a", "b"):
        out = tmp_path_factory.mktemp(f"bench_{tag}")
        cfg = PipelineConfig(
            out_dir=str(out), seed=BENCH_SEED,
            scenario=SynthScenario(n_individuals=20, n_videos=60,
                                   rng_seed=BENCH_SEED))
        start = time.perf_counter()
        result = run_pipeline(cfg)
        runs.append((result, time.perf_counter() - start))
    return runs


def test_geometry_rasterization_oracle():
    """rotated_iou vs a 1000x1000 rasterization oracle on 500 seeded pairs."""
    start = time.perf_counter()
    a45 = OrientedBox(0, 0, 2, 2, 0)
    b45 = OrientedBox(0, 0, 2, 2, math.pi / 4)
    special = rotated_iou(a45, b45)
    ok_special = abs(special - 0.7071) <= 2e-3
    rng = np.random.default_rng(2021)
    worst = 0.0
    for _ in range(500):
        a, b = random_boxes(rng, 2, span=12.0)
        delta = abs(rotated_iou(a, b) - rasterized_iou(a, b, n=1000))
        worst = max(worst, delta)
    elapsed = time.perf_counter() - start
    _verdict("geometry-oracle",
             ok_special and worst <= 2e-3 and elapsed < 30.0,
             f"45deg={special:.4f}, max|delta|={worst:.2e}, {elapsed:.1f}s")


def test_gradient_checks():
    """Analytic focal-loss and batch-hard RTL gradients vs central FD."""
    start = time.perf_counter()
    rng = np.random.default_rng(77)
    worst_focal = 0.0
    for _ in range(25):
        p = float(rng.uniform(0.02, 0.98))
        y = int(rng.integers(0, 2))
        params = FocalLossParams(gamma=float(rng.uniform(0, 4)),
                                 alpha=float(rng.uniform(0.05, 0.95)))
        step = 1e-6
        numeric = (focal_loss(p + step, y, params)
                   - focal_loss(p - step, y, params)) / (2 * step)
        analytic = focal_loss_grad(p, y, params)
        rel = abs(analytic - numeric) / max(abs(numeric), 1e-9)
        worst_focal = max(worst_focal, rel)

    config = EmbedderConfig(kind="patch", in_h=8, in_w=16, embed_dim=8,
                            patch_grid=(4, 8))
    levels = np.linspace(0.15, 0.85, 4)
    crops = np.stack([
        levels[t] + rng.uniform(-0.1, 0.1, (8, 16))
        for t in range(4) for _ in range(3)])
    tids = [t for t in range(4) for _ in range(3)]
    vids = [f"v{t % 3}" for t in tids]
    worst_rtl = 0.0
    step = 1e-5
    for draw in range(20):
        model = init_model(config, rng_seed=1000 + draw)
        assert model.n_params() <= 500
        model.set_flat_params(model.flat_params()
                              + rng.normal(0, 0.05, model.n_params()))
        _, grads, mined = batch_loss_and_grads(model, crops, tids, vids)
        analytic = np.concatenate([grads[k].ravel() for k in sorted(grads)])
        flat = model.flat_params().copy()
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += step
            model.set_flat_params(bumped)
            hi, _, _ = batch_loss_and_grads(model, crops, tids, vids,
                                            mined=mined)
            bumped[i] -= 2 * step
            model.set_flat_params(bumped)
            lo, _, _ = batch_loss_and_grads(model, crops, tids, vids,
                                            mined=mined)
            numeric[i] = (hi - lo) / (2 * step)
        model.set_flat_params(flat)
        rel = (np.linalg.norm(analytic - numeric)
               / max(np.linalg.norm(numeric), 1e-12))
        worst_rtl = max(worst_rtl, rel)
    elapsed = time.perf_counter() - start
    _verdict("gradient-checks",
             worst_focal <= 1e-4 and worst_rtl <= 1e-4 and elapsed < 10.0,
             f"focal rel={worst_focal:.2e}, rtl rel={worst_rtl:.2e}, "
             f"{elapsed:.1f}s")


def test_encode_decode_roundtrip():
    """decode(encode(gt, anchor), anchor) == gt to 1e-9 over 1000 pairs."""
    rng = np.random.default_rng(3)
    boxes = random_boxes(rng, 2000, span=300.0)
    worst = 0.0
    for gt, anchor in zip(boxes[::2], boxes[1::2]):
        back = decode_box(encode_box(gt, anchor), anchor)
        worst = max(worst, abs(back.cx - gt.cx), abs(back.cy - gt.cy),
                    abs(back.w - gt.w), abs(back.h - gt.h),
                    abs(back.theta - gt.theta))
    _verdict("encode-decode-roundtrip", worst <= 1e-9,
             f"max err={worst:.2e} over 1000 pairs")


def test_em_correctness():
    """Monotone EM over 50 seeds, k=1 closed form, two-cloud recovery."""
    rng = np.random.default_rng(5)
    base = np.vstack([rng.normal(0, 1.0, (80, 5)),
                      rng.normal(2.5, 0.8, (80, 5)),
                      rng.normal(-2.0, 1.2, (80, 5))])
    monotone = True
    worst_drop = 0.0
    for seed in range(50):
        model = fit_gmm(base, k=4, iters=200, rng_seed=seed)
        trace = model.log_likelihoods
        for prev, curr in zip(trace, trace[1:]):
            drop = prev - curr
            worst_drop = max(worst_drop, drop)
            if drop > 1e-9:
                monotone = False

    x1 = rng.normal(1.5, 2.0, (300, 7))
    closed = fit_gmm(x1, k=1, rng_seed=0)
    k1_err = max(np.max(np.abs(closed.means[0] - x1.mean(axis=0))),
                 np.max(np.abs(closed.covariances[0] - x1.var(axis=0))))

    clouds = np.vstack([rng.normal(0, 0.05, (100, 6)),
                        rng.normal(4.0, 0.05, (100, 6))])
    two = fit_gmm(clouds, k=2, iters=200, rng_seed=1, n_init=4)
    got = sorted(two.means[:, 0])
    want = sorted([clouds[:100, 0].mean(), clouds[100:, 0].mean()])
    cloud_err = max(abs(got[0] - want[0]), abs(got[1] - want[1]))

    _verdict("em-correctness",
             monotone and k1_err <= 1e-9 and cloud_err < 0.01,
             f"worst ll drop={worst_drop:.2e}, k1 err={k1_err:.2e}, "
             f"cloud err={cloud_err:.2e}")


def test_ari_oracle():
    """Exact brute-force agreement for n<=6 plus near-zero random baseline."""
    worst = 0.0
    pairs = 0
    for n in range(2, 7):
        partitions = list(set_partitions(list(range(n))))
        for pa in partitions:
            for pb in partitions:
                worst = max(worst, abs(adjusted_rand_index(pa, pb)
                                       - pair_counting_ari(pa, pb)))
                pairs += 1
    identical = adjusted_rand_index([0, 1, 1, 2], [5, 9, 9, 7])
    rng = np.random.default_rng(6)
    truth = rng.integers(0, 5, 100)
    mean_abs = np.mean([abs(adjusted_rand_index(truth, rng.permutation(truth)))
                        for _ in range(1000)])
    _verdict("ari-oracle",
             worst <= 1e-12 and identical == 1.0 and mean_abs <= 0.05,
             f"max|delta|={worst:.2e} over {pairs} pairs, "
             f"random mean|ARI|={mean_abs:.4f}")


def test_tracking_zero_switches():
    """Zero-noise linking reproduces GT identity segments over 20 seeds."""
    herd = generate_herd(8, rng_seed=99)
    failures = 0
    for seed in range(20):
        scenario = SynthScenario(n_individuals=8, n_videos=2, rng_seed=seed)
        for video_index in range(scenario.n_videos):
            gt = video_ground_truth(herd, scenario, video_index)
            dets = jitter_detections(gt, DetectorNoise.zero(), seed,
                                     scenario.frame_w, scenario.frame_h)
            frames = [dets[fi] for fi in gt.frame_indices]
            linked = link_detections(frames, TrackingConfig(),
                                     video_id=gt.video_id)

            def segments(tracklets):
                return sorted(tuple((d.frame_index, d.box.cx, d.box.cy)
                                    for d in t.detections) for t in tracklets)

            if segments(linked) != segments(gt.tracklets):
                failures += 1
    _verdict("tracking-zero-switches", failures == 0,
             f"{failures} mismatching videos across 20 seeds")


def test_ap_sanity():
    """AP edge values and monotone degradation under growing jitter."""
    rng = np.random.default_rng(8)
    gts = {0: random_boxes(rng, 5, span=60.0), 1: random_boxes(rng, 4, span=60.0)}
    perfect = [Detection(b, 1.0, img) for img, boxes in gts.items()
               for b in boxes]
    ap_perfect = average_precision(perfect, gts, 0.7)

    hit = OrientedBox(0, 0, 4, 2, 0)
    other = OrientedBox(50, 50, 4, 2, 0)
    hand = average_precision(
        [Detection(hit, 0.9, 0), Detection(OrientedBox(100, 0, 4, 2, 0), 0.8, 0)],
        {0: [hit, other]}, 0.7)

    herd = generate_herd(5, rng_seed=4)
    scenario = SynthScenario(n_individuals=5, n_videos=2, rng_seed=4)
    base = DetectorNoise(center_sigma=1.5, size_sigma=0.05, angle_sigma=0.05,
                         miss_rate=0.0, false_positive_rate=0.3)
    aps = []
    for factor in (0.0, 0.5, 1.0, 2.0, 4.0):
        preds = []
        gts_by_image = {}
        for video_index in range(scenario.n_videos):
            gt = video_ground_truth(herd, scenario, video_index)
            dets = jitter_detections(gt, base.scaled(factor), 11,
                                     scenario.frame_w, scenario.frame_h)
            offset = video_index * 1_000_000
            for fi in gt.frame_indices:
                gts_by_image[offset + fi] = [i.box for i in gt.instances[fi]]
                preds.extend(Detection(d.box, d.confidence, offset + fi)
                             for d in dets[fi])
        aps.append(average_precision(preds, gts_by_image, 0.7))
    monotone = all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))
    _verdict("ap-sanity",
             ap_perfect == 1.0 and abs(hand - 0.5) <= 1e-12
             and monotone and aps[-1] < aps[0],
             f"perfect={ap_perfect}, hand={hand}, sweep="
             + "/".join(f"{a:.3f}" for a in aps))


def test_end_to_end_benchmark(benchmark_runs):
    """20 identities, 60 videos, default config: metric floors and runtime."""
    (result, elapsed), _ = benchmark_runs
    report = result.report
    top = report["top_n"]
    grid_values = [top[str(n)] for n in (1, 2, 4, 8, 16)]
    monotone = all(b >= a for a, b in zip(grid_values, grid_values[1:]))
    ok = (top["1"] >= 0.85 and top["4"] >= 0.95 and report["ari"] >= 0.70
          and elapsed <= BENCH_RUNTIME_LIMIT_S and monotone
          and report["top_n_at_identity_count"] == 1.0)
    _verdict("end-to-end-benchmark", ok,
             f"top1={top['1']:.4f}, top4={top['4']:.4f}, "
             f"ari={report['ari']:.4f}, top@k={report['top_n_at_identity_count']}, "
             f"{elapsed:.0f}s")


def test_benchmark_determinism(benchmark_runs):
    """Identical seeds produce byte-identical metric reports."""
    (run_a, _), (run_b, _) = benchmark_runs
    bytes_a = run_a.report_path.read_bytes()
    bytes_b = run_b.report_path.read_bytes()
    _verdict("benchmark-determinism", bytes_a == bytes_b,
             f"{len(bytes_a)} bytes vs {len(bytes_b)} bytes, "
             f"equal={bytes_a == bytes_b}")
