"""End-to-end orchestration: data source to metrics report.

Stages (source -> detect -> track -> samples -> stills -> train -> cluster
-> label state -> report) each persist their artifact under
``<out_dir>/stages/<name>`` together with a fingerprint of everything they
depend on; reruns load any stage whose fingerprint still matches and
recompute the rest. The metrics report contains no timestamps or timings,
so identical seeds give byte-identical reports.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .clustering import (
    ClusterAssignment,
    GmmModel,
    adjusted_rand_index,
    assign,
    fit_gmm,
    overlap_scores,
    rank_clusters,
    top_n_accuracy,
)
from .detector_math import ap_report
from .embedder import (
    EmbedderConfig,
    EmbedderModel,
    TrainConfig,
    embed_crops,
    load_model,
    log_to_csv,
    save_model,
    train,
)
from .geometry import Crop, Detection, OrientedBox, rotated_nms
from .synthherd import (
    DetectorNoise,
    GroundTruth,
    SynthIdentity,
    SynthScenario,
    iter_stills,
    jitter_box,
    jitter_detections,
    render_video,
    video_ground_truth,
)
from .tracking import (
    Tracklet,
    TrackingConfig,
    link_detections,
    select_training_tracklets,
    tracklets_from_jsonl,
    tracklets_to_jsonl,
)
from .tripletgen import (
    SampleSet,
    build_positive_set,
    load_sample_set,
    sample_triplet_batch,
    save_sample_set,
    val_test_split,
)
from .util import canonical_json, fingerprint, rng_for

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
TOP_N_GRID = (1, 2, 4, 8, 16)


class PipelineStageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for the CLI."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    """Everything a run needs; exactly one data source must be set."""

    out_dir: str = "runs/default"
    seed: int = 0
    scenario: SynthScenario | None = None
    ingest_dir: str | None = None
    noise: DetectorNoise = field(default_factory=DetectorNoise)
    nms_iou_thr: float = 0.28
    nms_conf_thr: float = 0.3
    ap_iou_thr: float = 0.7
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    min_tracklet_length: int = 3
    aug_per_crop: int = 2
    max_angle_deg: float = 7.0
    crop_h: int = 40
    crop_w: int = 96
    stills_per_identity: int = 24
    batches_per_epoch: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    k: int | None = None
    gmm_iters: int = 200
    gmm_restarts: int = 8
    service_top_n: int = 4
    exemplars_per_identity: int = 3
    save_frames: bool = False

    def __post_init__(self):
        if (self.scenario is None) == (self.ingest_dir is None):
            raise ValueError(
                "configure exactly one data source: scenario or ingest_dir")
        if self.crop_h <= 0 or self.crop_w <= 0:
            raise ValueError("crop size must be positive")

    def to_json(self) -> dict:
        out = {
            "out_dir": self.out_dir,
            "seed": self.seed,
            "scenario": self.scenario.to_json() if self.scenario else None,
            "ingest_dir": self.ingest_dir,
            "noise": self.noise.to_json(),
            "nms_iou_thr": self.nms_iou_thr,
            "nms_conf_thr": self.nms_conf_thr,
            "ap_iou_thr": self.ap_iou_thr,
            "tracking": {
                "sample_rate_hz": self.tracking.sample_rate_hz,
                "gate_dist": self.tracking.gate_dist,
                "max_missed_frames": self.tracking.max_missed_frames,
            },
            "min_tracklet_length": self.min_tracklet_length,
            "aug_per_crop": self.aug_per_crop,
            "max_angle_deg": self.max_angle_deg,
            "crop_h": self.crop_h,
            "crop_w": self.crop_w,
            "stills_per_identity": self.stills_per_identity,
            "batches_per_epoch": self.batches_per_epoch,
            "train": dict(self.train.__dict__),
            "embedder": self.embedder.to_json(),
            "k": self.k,
            "gmm_iters": self.gmm_iters,
            "gmm_restarts": self.gmm_restarts,
            "service_top_n": self.service_top_n,
            "exemplars_per_identity": self.exemplars_per_identity,
            "save_frames": self.save_frames,
        }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        if obj.get("scenario"):
            obj["scenario"] = SynthScenario.from_json(obj["scenario"])
        if obj.get("noise"):
            obj["noise"] = DetectorNoise.from_json(obj["noise"])
        if obj.get("tracking"):
            obj["tracking"] = TrackingConfig(**obj["tracking"])
        if obj.get("train"):
            obj["train"] = TrainConfig(**obj["train"])
        if obj.get("embedder"):
            obj["embedder"] = EmbedderConfig.from_json(obj["embedder"])
        return cls(**obj)


@dataclass
class EvalReport:
    """What run_pipeline hands back: the report plus run bookkeeping."""

    report: dict
    report_path: Path
    stage_status: dict[str, str]  # stage -> "computed" | "cached"
    out_dir: Path


# ---------------------------------------------------------------------------
# Data sources
# ---------------------------------------------------------------------------

class _SyntheticSource:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.scenario = cfg.scenario
        self._herd: list[SynthIdentity] | None = None

    def fingerprint_payload(self) -> dict:
        return {"kind": "synthetic", "scenario": self.scenario.to_json(),
                "noise": self.cfg.noise.to_json(), "seed": self.cfg.seed}

    @property
    def herd(self) -> list[SynthIdentity]:
        if self._herd is None:
            from .synthherd import generate_herd

            self._herd = generate_herd(self.scenario.n_individuals,
                                       rng_seed=self.scenario.rng_seed)
        return self._herd

    def enrolled_ids(self) -> list[int]:
        return [a.identity_id for a in self.herd if a.enrollable]

    def video_ids(self) -> list[str]:
        return [f"video{i:04d}" for i in range(self.scenario.n_videos)]

    def ground_truth(self, video_index: int) -> GroundTruth:
        return video_ground_truth(self.herd, self.scenario, video_index)

    def frames(self, video_index: int) -> dict[int, np.ndarray]:
        frames, _ = render_video(self.herd, self.scenario, video_index)
        return frames

    def detections(self, video_index: int) -> dict[int, list[Detection]]:
        gt = self.ground_truth(video_index)
        return jitter_detections(gt, self.cfg.noise, self.cfg.seed,
                                 self.scenario.frame_w, self.scenario.frame_h)

    def still_samples(self):
        return iter_stills(self.herd, self.cfg.stills_per_identity,
                           self.scenario, rng_seed=self.cfg.seed)


class _IngestSource:
    """Reads the layout written by synthherd.export_dataset."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.ingest_dir)
        meta = json.loads((self.root / "meta.json").read_text())
        self.scenario = SynthScenario.from_json(meta["scenario"])
        self.identity_meta = meta["identities"]
        patterns = np.load(self.root / "patterns.npz")
        self._herd = [SynthIdentity(identity_id=entry["identity_id"],
                                    pattern=patterns[str(entry["identity_id"])],
                                    enrollable=entry["enrollable"])
                      for entry in self.identity_meta]

    def fingerprint_payload(self) -> dict:
        return {"kind": "ingest", "root": str(self.root.resolve()),
                "noise": self.cfg.noise.to_json(), "seed": self.cfg.seed}

    @property
    def herd(self) -> list[SynthIdentity]:
        return self._herd

    def enrolled_ids(self) -> list[int]:
        return [a.identity_id for a in self._herd if a.enrollable]

    def video_ids(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "gt").glob("*.jsonl"))

    def ground_truth(self, video_index: int) -> GroundTruth:
        video_id = self.video_ids()[video_index]
        text = (self.root / "gt" / f"{video_id}.jsonl").read_text()
        gt = GroundTruth(video_id=video_id, frame_indices=[])
        frame_set: set[int] = set()
        for line in text.splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            tracklet = Tracklet.from_json(row)
            gt.tracklets.append(tracklet)
            gt.tracklet_identity[tracklet.tracklet_id] = row["identity_id"]
            for det in tracklet.detections:
                frame_set.add(det.frame_index)
                from .synthherd import GtInstance

                gt.instances.setdefault(det.frame_index, []).append(
                    GtInstance(row["identity_id"], det.box))
        gt.frame_indices = sorted(frame_set)
        return gt

    def frames(self, video_index: int) -> dict[int, np.ndarray]:
        from PIL import Image

        video_id = self.video_ids()[video_index]
        frames = {}
        for path in sorted((self.root / "videos" / video_id).glob("frame_*.png")):
            index = int(path.stem.split("_")[1])
            frames[index] = np.asarray(Image.open(path), dtype=np.float64) / 255.0
        if not frames:
            raise FileNotFoundError(f"no frames found for {video_id}")
        return frames

    def detections(self, video_index: int) -> dict[int, list[Detection]]:
        video_id = self.video_ids()[video_index]
        path = self.root / "detections" / f"{video_id}.jsonl"
        gt = self.ground_truth(video_index)
        out: dict[int, list[Detection]] = {fi: [] for fi in gt.frame_indices}
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            det = Detection.from_json(json.loads(line))
            out.setdefault(det.frame_index, []).append(det)
        return out

    def still_samples(self):
        return iter_stills(self._herd, self.cfg.stills_per_identity,
                           self.scenario, rng_seed=self.cfg.seed)


def _make_source(cfg: PipelineConfig):
    return _SyntheticSource(cfg) if cfg.scenario else _IngestSource(cfg)


# ---------------------------------------------------------------------------
# Stage cache
# ---------------------------------------------------------------------------

class _Stages:
    def __init__(self, out_dir: Path):
        self.root = out_dir / "stages"
        self.status: dict[str, str] = {}

    def run(self, name: str, payload: dict, compute, save, load):
        stage_dir = self.root / name
        meta_path = stage_dir / "stage.json"
        fp = fingerprint(payload)
        if meta_path.exists():
            try:
                meta = json.loads(meta_path.read_text())
                if meta.get("fingerprint") == fp:
                    value = load(stage_dir)
                    self.status[name] = "cached"
                    logger.info("stage %s: cached", name)
                    return value, fp
            except Exception as exc:  # stale or unreadable cache: recompute
                logger.warning("stage %s: cache unusable (%s); recomputing",
                               name, exc)
        try:
            value = compute()
            stage_dir.mkdir(parents=True, exist_ok=True)
            save(stage_dir, value)
            meta_path.write_text(canonical_json({"fingerprint": fp}))
        except PipelineStageError:
            raise
        except BaseException as exc:
            raise PipelineStageError(name, exc) from exc
        self.status[name] = "computed"
        logger.info("stage %s: computed", name)
        return value, fp


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def _save_detections(stage_dir: Path, value) -> None:
    gts, dets, report = value
    det_dir = stage_dir / "detections"
    det_dir.mkdir(exist_ok=True)
    for video_id, by_frame in dets.items():
        lines = [json.dumps(d.to_json(), sort_keys=True)
                 for fi in sorted(by_frame) for d in by_frame[fi]]
        (det_dir / f"{video_id}.jsonl").write_text(
            "\n".join(lines) + ("\n" if lines else ""))
    gt_dir = stage_dir / "gt"
    gt_dir.mkdir(exist_ok=True)
    for video_id, gt in gts.items():
        rows = []
        for tracklet in gt.tracklets:
            row = tracklet.to_json()
            row["identity_id"] = gt.tracklet_identity[tracklet.tracklet_id]
            rows.append(json.dumps(row, sort_keys=True))
        (gt_dir / f"{video_id}.jsonl").write_text(
            "\n".join(rows) + ("\n" if rows else ""))
    if report is not None:
        (stage_dir / "ap.json").write_text(canonical_json(report))


def _load_detections(stage_dir: Path):
    dets: dict[str, dict[int, list[Detection]]] = {}
    for path in sorted((stage_dir / "detections").glob("*.jsonl")):
        by_frame: dict[int, list[Detection]] = {}
        for line in path.read_text().splitlines():
            if line.strip():
                det = Detection.from_json(json.loads(line))
                by_frame.setdefault(det.frame_index, []).append(det)
        dets[path.stem] = by_frame
    gts: dict[str, GroundTruth] = {}
    for path in sorted((stage_dir / "gt").glob("*.jsonl")):
        gt = GroundTruth(video_id=path.stem, frame_indices=[])
        frame_set: set[int] = set()
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            tracklet = Tracklet.from_json(row)
            gt.tracklets.append(tracklet)
            gt.tracklet_identity[tracklet.tracklet_id] = row["identity_id"]
            from .synthherd import GtInstance

            for det in tracklet.detections:
                frame_set.add(det.frame_index)
                gt.instances.setdefault(det.frame_index, []).append(
                    GtInstance(row["identity_id"], det.box))
        gt.frame_indices = sorted(frame_set)
        gts[path.stem] = gt
    ap_path = stage_dir / "ap.json"
    report = json.loads(ap_path.read_text()) if ap_path.exists() else None
    return gts, dets, report


def _stage_detect(cfg: PipelineConfig, source):
    """Ground truth, simulated detections after NMS, and the AP report."""
    gts: dict[str, GroundTruth] = {}
    nms_dets: dict[str, dict[int, list[Detection]]] = {}
    all_preds: list[Detection] = []
    gts_by_image: dict[int, list[OrientedBox]] = {}
    video_ids = source.video_ids()
    for video_index, video_id in enumerate(video_ids):
        gt = source.ground_truth(video_index)
        gts[video_id] = gt
        raw = source.detections(video_index)
        kept = rotated_nms([d for fi in sorted(raw) for d in raw[fi]],
                           cfg.nms_iou_thr, cfg.nms_conf_thr)
        by_frame: dict[int, list[Detection]] = {fi: [] for fi in gt.frame_indices}
        for det in kept:
            by_frame.setdefault(det.frame_index, []).append(det)
        nms_dets[video_id] = by_frame
        offset = video_index * 1_000_000
        for fi in gt.frame_indices:
            image_id = offset + fi
            gts_by_image[image_id] = [inst.box for inst in gt.instances[fi]]
            for det in by_frame.get(fi, []):
                all_preds.append(Detection(det.box, det.confidence, image_id))
    report = None
    if any(gts_by_image.values()):
        report = ap_report(all_preds, gts_by_image, cfg.ap_iou_thr)
    return gts, nms_dets, report


def _stage_track(cfg: PipelineConfig, dets_by_video) -> list[Tracklet]:
    tracklets: list[Tracklet] = []
    for video_index, video_id in enumerate(sorted(dets_by_video)):
        by_frame = dets_by_video[video_id]
        frames = [sorted(by_frame[fi], key=lambda d: -d.confidence)
                  for fi in sorted(by_frame)]
        tracklets.extend(link_detections(frames, cfg.tracking,
                                         video_id=video_id,
                                         start_id=video_index * 1000))
    return tracklets


def _stage_samples(cfg: PipelineConfig, source,
                   tracklets: list[Tracklet]) -> list[SampleSet]:
    selected = select_training_tracklets(tracklets, cfg.min_tracklet_length)
    by_video: dict[str, list[Tracklet]] = {}
    for tracklet in selected:
        by_video.setdefault(tracklet.video_id, []).append(tracklet)
    video_ids = source.video_ids()
    sets: list[SampleSet] = []
    for video_id in sorted(by_video):
        frames = source.frames(video_ids.index(video_id))
        for tracklet in by_video[video_id]:
            sets.append(build_positive_set(
                tracklet, frames, aug_per_crop=cfg.aug_per_crop,
                max_angle_deg=cfg.max_angle_deg, rng_seed=cfg.seed,
                out_h=cfg.crop_h, out_w=cfg.crop_w))
    if not sets:
        raise ValueError("no tracklets long enough to train on")
    return sets


def _save_samples(stage_dir: Path, sets: list[SampleSet]) -> None:
    index = []
    for sample_set in sets:
        name = f"{sample_set.video_id}_t{sample_set.tracklet_id:06d}"
        save_sample_set(sample_set, stage_dir / "sample_sets" / name)
        index.append(name)
    (stage_dir / "index.json").write_text(canonical_json(index))


def _load_samples(stage_dir: Path) -> list[SampleSet]:
    index = json.loads((stage_dir / "index.json").read_text())
    return [load_sample_set(stage_dir / "sample_sets" / name) for name in index]


@dataclass
class _Stills:
    crops: list[Crop]
    labels: list[int]
    val_idx: list[int]
    test_idx: list[int]


def _stage_stills(cfg: PipelineConfig, source) -> _Stills:
    """Held-out labelled stills with annotation-grade box jitter."""
    crops: list[Crop] = []
    labels: list[int] = []
    rng = rng_for(cfg.seed, "still-jitter")
    from .geometry import extract_normalized_crop
    from .tripletgen import _quantize

    for still in source.still_samples():
        fh, fw = still.frame.shape
        box = jitter_box(still.box, cfg.noise, rng, fw, fh)
        crop = extract_normalized_crop(still.frame, box, cfg.crop_h, cfg.crop_w)
        crop.pixels = _quantize(crop.pixels)
        crops.append(crop)
        labels.append(still.identity_id)
    enrolled = set(source.enrolled_ids())
    keep = [i for i, lab in enumerate(labels) if lab in enrolled]
    crops = [crops[i] for i in keep]
    labels = [labels[i] for i in keep]
    val_idx, test_idx = val_test_split(len(labels), labels, rng_seed=cfg.seed)
    return _Stills(crops, labels, val_idx, test_idx)


def _save_stills(stage_dir: Path, stills: _Stills) -> None:
    stack = np.stack([c.pixels for c in stills.crops])
    np.savez_compressed(stage_dir / "stills.npz",
                        crops=np.round(stack * 255).astype(np.uint8),
                        labels=np.asarray(stills.labels),
                        val_idx=np.asarray(stills.val_idx, dtype=np.int64),
                        test_idx=np.asarray(stills.test_idx, dtype=np.int64))


def _load_stills(stage_dir: Path) -> _Stills:
    data = np.load(stage_dir / "stills.npz")
    crops = [Crop(pixels=arr.astype(np.float64) / 255.0,
                  source_box=OrientedBox(0, 0, 1, 1, 0), frame_index=i)
             for i, arr in enumerate(data["crops"])]
    return _Stills(crops=crops, labels=[int(v) for v in data["labels"]],
                   val_idx=[int(v) for v in data["val_idx"]],
                   test_idx=[int(v) for v in data["test_idx"]])


def _stage_train(cfg: PipelineConfig, sets: list[SampleSet], stills: _Stills):
    per_epoch = cfg.batches_per_epoch
    if per_epoch is None:
        # a few passes over the sample sets per epoch; small epochs give the
        # pocket algorithm dense snapshots along the trajectory
        per_epoch = max(4, min(32, math.ceil(len(sets) / 2)))

    def make_batches(epoch: int):
        return [sample_triplet_batch(sets, cfg.train.batch_size,
                                     rng_seed=cfg.seed * 1_000_003
                                     + epoch * 1_009 + b)
                for b in range(per_epoch)]

    val_crops = [stills.crops[i] for i in stills.val_idx]
    val_labels = [stills.labels[i] for i in stills.val_idx]
    return train(make_batches, (val_crops, val_labels), cfg.train,
                 embedder_config=cfg.embedder)


@dataclass
class _ClusterOutput:
    gmm: GmmModel
    rankings: list
    metrics: dict
    train_assignment: ClusterAssignment
    scores: list


def _stage_cluster(cfg: PipelineConfig, source, model: EmbedderModel,
                   sets: list[SampleSet], stills: _Stills) -> _ClusterOutput:
    train_crops = [c for s in sets for c in s.crops]
    train_emb = embed_crops(model, train_crops)
    enrolled = source.enrolled_ids()
    k = cfg.k if cfg.k is not None else len(enrolled)
    gmm = fit_gmm(train_emb, k=k, iters=cfg.gmm_iters, rng_seed=cfg.seed,
                  n_init=cfg.gmm_restarts)
    train_assignment = assign(gmm, train_emb)

    val_emb = embed_crops(model, [stills.crops[i] for i in stills.val_idx])
    val_labels = [stills.labels[i] for i in stills.val_idx]
    val_assignment = assign(gmm, val_emb)
    scores = overlap_scores(val_assignment, val_labels)
    rankings = rank_clusters(scores, enrolled, n_clusters=k, rng_seed=cfg.seed)

    test_emb = embed_crops(model, [stills.crops[i] for i in stills.test_idx])
    test_labels = [stills.labels[i] for i in stills.test_idx]
    test_assignment = assign(gmm, test_emb)
    ari = adjusted_rand_index(test_labels,
                              [int(v) for v in test_assignment.labels])
    top_n = {str(n): top_n_accuracy(rankings, test_assignment, test_labels, n)
             for n in TOP_N_GRID}
    top_at_k = top_n_accuracy(rankings, test_assignment, test_labels,
                              len(enrolled))
    metrics = {"ari": ari, "top_n": top_n,
               "top_n_at_identity_count": top_at_k,
               "n_val": len(val_labels), "n_test": len(test_labels),
               "k": k, "em_iterations": len(gmm.log_likelihoods)}
    return _ClusterOutput(gmm=gmm, rankings=rankings, metrics=metrics,
                          train_assignment=train_assignment, scores=scores)


def _save_cluster(stage_dir: Path, out: _ClusterOutput) -> None:
    (stage_dir / "gmm.json").write_text(canonical_json(out.gmm.to_json()))
    (stage_dir / "metrics.json").write_text(canonical_json(out.metrics))
    report = []
    sizes = np.bincount(out.train_assignment.labels, minlength=out.gmm.k)
    score_map = {(s.cluster_index, s.identity_label): s.value
                 for s in out.scores}
    for ranking in out.rankings:
        report.append({
            "cluster_index": ranking.cluster_index,
            "assigned_id": ranking.assigned_id,
            "size": int(sizes[ranking.cluster_index]),
            "ranking": [
                {"identity_id": ident,
                 "overlap": score_map.get((ranking.cluster_index, ident), 0.0)}
                for ident in ranking.identities],
        })
    (stage_dir / "cluster_report.json").write_text(canonical_json(report))
    np.savez_compressed(stage_dir / "assignments.npz",
                        train_labels=out.train_assignment.labels,
                        train_resp=out.train_assignment.responsibilities)


def _load_cluster(stage_dir: Path) -> _ClusterOutput:
    gmm = GmmModel.from_json(json.loads((stage_dir / "gmm.json").read_text()))
    metrics = json.loads((stage_dir / "metrics.json").read_text())
    report = json.loads((stage_dir / "cluster_report.json").read_text())
    from .clustering import ClusterRanking, OverlapScore

    rankings = []
    scores = []
    for entry in report:
        rankings.append(ClusterRanking(
            cluster_index=entry["cluster_index"],
            identities=[r["identity_id"] for r in entry["ranking"]]))
        for r in entry["ranking"]:
            if r["overlap"] > 0:
                scores.append(OverlapScore(entry["cluster_index"],
                                           r["identity_id"], 1, 1))
    data = np.load(stage_dir / "assignments.npz")
    assignment = ClusterAssignment(labels=data["train_labels"],
                                   responsibilities=data["train_resp"])
    return _ClusterOutput(gmm=gmm, rankings=rankings, metrics=metrics,
                          train_assignment=assignment, scores=scores)


def _stage_label_state(cfg: PipelineConfig, source, stage_root: Path,
                       sets: list[SampleSet], cluster: _ClusterOutput) -> dict:
    """Assemble what the annotation service needs, with file URLs."""
    samples_dir = stage_root / "samples" / "sample_sets"
    set_names = {id(s): f"{s.video_id}_t{s.tracklet_id:06d}" for s in sets}

    # per-tracklet majority cluster over its crops
    offsets = {}
    pos = 0
    for s in sets:
        offsets[id(s)] = (pos, pos + len(s))
        pos += len(s)
    overlaps = json.loads((stage_root / "cluster" / "cluster_report.json")
                          .read_text())
    ranking_by_cluster = {e["cluster_index"]: e["ranking"] for e in overlaps}

    tracklet_entries = []
    for s in sets:
        lo, hi = offsets[id(s)]
        labels = cluster.train_assignment.labels[lo:hi]
        majority = int(np.bincount(labels, minlength=cluster.gmm.k).argmax())
        candidates = [
            {"identity_id": r["identity_id"], "confidence": r["overlap"]}
            for r in ranking_by_cluster[majority]]
        name = set_names[id(s)]
        manifest = json.loads((samples_dir / name / "manifest.json").read_text())
        crop_urls = [f"/files/stages/samples/sample_sets/{name}/{c}"
                     for c in manifest["crops"][:8]]
        tracklet_entries.append({
            "tracklet_id": s.tracklet_id,
            "video_id": s.video_id,
            "cluster_index": majority,
            "crop_urls": crop_urls,
            "candidates": candidates,
        })

    # exemplars: highest-responsibility train crops of each identity's best
    # cluster
    crop_paths = []
    for s in sets:
        name = set_names[id(s)]
        manifest = json.loads((samples_dir / name / "manifest.json").read_text())
        crop_paths.extend(
            f"/files/stages/samples/sample_sets/{name}/{c}"
            for c in manifest["crops"])
    best_cluster: dict[object, tuple[float, int]] = {}
    for entry in overlaps:
        for r in entry["ranking"]:
            ident, val = r["identity_id"], r["overlap"]
            if val > best_cluster.get(ident, (0.0, -1))[0]:
                best_cluster[ident] = (val, entry["cluster_index"])
    identities = []
    resp = cluster.train_assignment.responsibilities
    labels_arr = cluster.train_assignment.labels
    for ident in source.enrolled_ids():
        _, cluster_index = best_cluster.get(ident, (0.0, -1))
        exemplar_urls: list[str] = []
        if cluster_index >= 0:
            members = np.nonzero(labels_arr == cluster_index)[0]
            ranked = members[np.argsort(-resp[members, cluster_index],
                                        kind="stable")]
            exemplar_urls = [crop_paths[i]
                             for i in ranked[:cfg.exemplars_per_identity]]
        identities.append({"identity_id": ident,
                           "exemplar_urls": exemplar_urls})

    state = {
        "schema_version": 1,
        "top_n": cfg.service_top_n,
        "tracklets": tracklet_entries,
        "identities": identities,
    }
    return state


def export_embeddings(model: EmbedderModel, crops: Sequence[Crop], path,
                      gmm: GmmModel | None = None,
                      labels: Sequence | None = None) -> None:
    """One CSV row per crop: id (may be empty), cluster, embedding values."""
    emb = embed_crops(model, crops)
    clusters = assign(gmm, emb).labels if gmm is not None else None
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        dim = emb.shape[1]
        writer.writerow(["id", "cluster"] + [f"v{i:03d}" for i in range(dim)])
        for i in range(emb.shape[0]):
            ident = "" if labels is None else labels[i]
            cluster = "" if clusters is None else int(clusters[i])
            writer.writerow([ident, cluster] + [repr(float(v)) for v in emb[i]])


def import_embeddings(path) -> tuple[list, list, np.ndarray]:
    """Inverse of export_embeddings; returns (ids, clusters, vectors)."""
    ids, clusters, rows = [], [], []
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(row[0])
            clusters.append(row[1])
            rows.append([float(v) for v in row[2:]])
    return ids, clusters, np.asarray(rows)


def _human_report(report: dict) -> str:
    lines = [
        "herdid pipeline report (schema v%d)" % report["schema_version"],
        "source: %s  seed: %d" % (report["source"], report["seed"]),
        "videos: %d  tracklets: %d (trained on %d sets, %d crops)" % (
            report["n_videos"], report["n_tracklets"],
            report["n_sample_sets"], report["n_train_crops"]),
        "stills: %d val / %d test across %d identities" % (
            report["n_val_stills"], report["n_test_stills"],
            report["n_identities"]),
    ]
    if report.get("detector_ap") is not None:
        lines.append("detector AP@%.2f: %.4f (%d preds / %d gts)" % (
            report["ap_iou_thr"], report["detector_ap"],
            report["n_detections"], report["n_gt_instances"]))
    lines.append("ARI (test): %.4f" % report["ari"])
    tops = "  ".join("top-%s: %.4f" % (n, v)
                     for n, v in report["top_n"].items())
    lines.append(tops)
    lines.append("pocket epoch: %d  best val loss: %.6f" % (
        report["train"]["pocket_epoch"], report["train"]["best_val_loss"]))
    return "\n".join(lines) + "\n"


def run_pipeline(cfg: PipelineConfig) -> EvalReport:
    """Execute every stage, persist artifacts, and write the report.

    Stages whose inputs (config plus upstream fingerprints) are unchanged
    load from cache. The JSON report is deterministic for a given config and
    seed.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(canonical_json(cfg.to_json()))
    stages = _Stages(out_dir)
    try:
        source = _make_source(cfg)
    except PipelineStageError:
        raise
    except BaseException as exc:
        raise PipelineStageError("source", exc) from exc
    source_fp = fingerprint(source.fingerprint_payload())

    detect_payload = {"source": source_fp, "nms_iou": cfg.nms_iou_thr,
                      "nms_conf": cfg.nms_conf_thr, "ap_iou": cfg.ap_iou_thr}
    (gts, dets, ap), detect_fp = stages.run(
        "detect", detect_payload,
        lambda: _stage_detect(cfg, source),
        _save_detections, _load_detections)

    track_payload = {"detect": detect_fp, "tracking": {
        "gate": cfg.tracking.gate_dist,
        "missed": cfg.tracking.max_missed_frames}}
    tracklets, track_fp = stages.run(
        "track", track_payload,
        lambda: _stage_track(cfg, dets),
        lambda d, v: (d / "tracklets.jsonl").write_text(tracklets_to_jsonl(v)),
        lambda d: tracklets_from_jsonl((d / "tracklets.jsonl").read_text()))

    samples_payload = {"track": track_fp, "aug": cfg.aug_per_crop,
                       "angle": cfg.max_angle_deg, "min_len":
                       cfg.min_tracklet_length, "crop": [cfg.crop_h, cfg.crop_w],
                       "seed": cfg.seed}
    sets, samples_fp = stages.run(
        "samples", samples_payload,
        lambda: _stage_samples(cfg, source, tracklets),
        _save_samples, _load_samples)

    stills_payload = {"source": source_fp, "per_id": cfg.stills_per_identity,
                      "crop": [cfg.crop_h, cfg.crop_w], "seed": cfg.seed}
    stills, stills_fp = stages.run(
        "stills", stills_payload,
        lambda: _stage_stills(cfg, source),
        _save_stills, _load_stills)

    train_payload = {"samples": samples_fp, "stills": stills_fp,
                     "train": dict(cfg.train.__dict__),
                     "embedder": cfg.embedder.to_json(),
                     "batches_per_epoch": cfg.batches_per_epoch,
                     "seed": cfg.seed}

    def _save_train(stage_dir: Path, result) -> None:
        save_model(result.model, stage_dir / "checkpoint.json")
        (stage_dir / "train_log.csv").write_text(log_to_csv(result.log))

    def _load_train(stage_dir: Path):
        model = load_model(stage_dir / "checkpoint.json")
        rows = list(csv.DictReader(io.StringIO(
            (stage_dir / "train_log.csv").read_text())))
        from .embedder import TrainLogRow, TrainResult

        log = [TrainLogRow(epoch=int(r["epoch"]),
                           train_loss=float(r["train_loss"]) if r["train_loss"]
                           else float("nan"),
                           val_loss=float(r["val_loss"]),
                           is_pocket=r["is_pocket"] == "1") for r in rows]
        pocket_epoch = next(r.epoch for r in log if r.is_pocket)
        return TrainResult(model=model, log=log, pocket_epoch=pocket_epoch)

    train_result, train_fp = stages.run(
        "train", train_payload,
        lambda: _stage_train(cfg, sets, stills),
        _save_train, _load_train)

    cluster_payload = {"train": train_fp, "k": cfg.k,
                       "iters": cfg.gmm_iters, "restarts": cfg.gmm_restarts,
                       "seed": cfg.seed}
    cluster, cluster_fp = stages.run(
        "cluster", cluster_payload,
        lambda: _stage_cluster(cfg, source, train_result.model, sets, stills),
        _save_cluster, _load_cluster)

    state_payload = {"cluster": cluster_fp, "top_n": cfg.service_top_n,
                     "exemplars": cfg.exemplars_per_identity}
    service_state, _ = stages.run(
        "label_state", state_payload,
        lambda: _stage_label_state(cfg, source, stages.root, sets, cluster),
        lambda d, v: (d / "service.json").write_text(canonical_json(v)),
        lambda d: json.loads((d / "service.json").read_text()))

    log_rows = train_result.log
    best_val = min(r.val_loss for r in log_rows)
    final_train = next((r.train_loss for r in reversed(log_rows)
                        if not math.isnan(r.train_loss)), float("nan"))
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "herdid_version": __version__,
        "source": "synthetic" if cfg.scenario else "ingest",
        "seed": cfg.seed,
        "n_identities": len(source.enrolled_ids()),
        "n_videos": len(source.video_ids()),
        "n_tracklets": len(tracklets),
        "n_sample_sets": len(sets),
        "n_train_crops": sum(len(s) for s in sets),
        "n_val_stills": len(stills.val_idx),
        "n_test_stills": len(stills.test_idx),
        "ap_iou_thr": cfg.ap_iou_thr,
        "detector_ap": None if ap is None else ap["ap"],
        "n_detections": None if ap is None else ap["n_preds"],
        "n_gt_instances": None if ap is None else ap["n_gts"],
        "ari": cluster.metrics["ari"],
        "top_n": cluster.metrics["top_n"],
        "top_n_at_identity_count": cluster.metrics["top_n_at_identity_count"],
        "train": {
            "epochs": cfg.train.epochs,
            "pocket_epoch": train_result.pocket_epoch,
            "best_val_loss": best_val,
            "final_train_loss": final_train,
        },
        "paths": {
            "checkpoint": "stages/train/checkpoint.json",
            "train_log": "stages/train/train_log.csv",
            "metrics": "stages/cluster/metrics.json",
            "cluster_report": "stages/cluster/cluster_report.json",
            "label_state": "stages/label_state/service.json",
            "detections_ap": "stages/detect/ap.json",
        },
    }
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    (out_dir / "report.txt").write_text(_human_report(report))
    run_log = {"stage_status": stages.status}
    (out_dir / "run_log.json").write_text(canonical_json(run_log))
    return EvalReport(report=report, report_path=report_path,
                      stage_status=stages.status, out_dir=out_dir)
