"""Build a completed pipeline run for the UI integration harness.

Usage: python3 scripts/make_fixture.py <out_dir>

Writes <out_dir>/fixture.json with the run directory, the report's Top-4
accuracy, and the ground-truth identity of every served tracklet (matched
through nearest ground-truth centres, since linked boxes carry detector
jitter).
"""

import json
import sys
from pathlib import Path

from herdid.embedder import TrainConfig
from herdid.pipeline import PipelineConfig, run_pipeline
from herdid.synthherd import SynthScenario
from herdid.tracking import tracklets_from_jsonl


def tracklet_identities(run_dir: Path) -> dict[int, int]:
    gt_centers: dict = {}
    for path in (run_dir / "stages" / "detect" / "gt").glob("*.jsonl"):
        for line in path.read_text().splitlines():
            row = json.loads(line)
            for det in row["detections"]:
                key = (row["video_id"], det["frame_index"])
                gt_centers.setdefault(key, []).append(
                    (det["box"]["cx"], det["box"]["cy"], row["identity_id"]))
    linked = tracklets_from_jsonl(
        (run_dir / "stages" / "track" / "tracklets.jsonl").read_text())
    identity_of = {}
    for tracklet in linked:
        votes: dict = {}
        for det in tracklet.detections:
            options = gt_centers.get((tracklet.video_id, det.frame_index))
            if not options:
                continue
            dist, ident = min(
                (((gx - det.box.cx) ** 2 + (gy - det.box.cy) ** 2) ** 0.5, gid)
                for gx, gy, gid in options)
            if dist < 30.0:
                votes[ident] = votes.get(ident, 0) + 1
        if votes:
            identity_of[tracklet.tracklet_id] = max(votes, key=votes.get)
    return identity_of


def main() -> int:
    out_dir = Path(sys.argv[1])
    run_dir = out_dir / "run"
    cfg = PipelineConfig(
        out_dir=str(run_dir), seed=23,
        scenario=SynthScenario(n_individuals=10, n_videos=20, rng_seed=23,
                               animals_per_video=(1, 2)),
        train=TrainConfig(epochs=4),
        stills_per_identity=24,
        gmm_restarts=8,
    )
    result = run_pipeline(cfg)
    service_state = json.loads(
        (run_dir / "stages" / "label_state" / "service.json").read_text())
    served = {entry["tracklet_id"] for entry in service_state["tracklets"]}
    identity_of = {k: v for k, v in tracklet_identities(run_dir).items()
                   if k in served}
    fixture = {
        "run_dir": str(run_dir),
        "top4": result.report["top_n"]["4"],
        "n_identities": result.report["n_identities"],
        "n_served": len(served),
        "identity_of": {str(k): v for k, v in identity_of.items()},
    }
    (out_dir / "fixture.json").write_text(json.dumps(fixture, indent=2))
    print(json.dumps({"ok": True, "top4": fixture["top4"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
