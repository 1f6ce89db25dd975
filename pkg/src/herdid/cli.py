"""Command-line surface: run, export, serve, synth."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .pipeline import (
    EvalReport,
    PipelineConfig,
    PipelineStageError,
    export_embeddings,
    import_embeddings,
    run_pipeline,
)
from .server import DEFAULT_PORT, serve_labels
from .synthherd import DetectorNoise, SynthScenario, export_dataset, generate_herd

logger = logging.getLogger(__name__)


def _load_config(args) -> PipelineConfig:
    if args.config:
        obj = json.loads(Path(args.config).read_text())
    else:
        obj = {"scenario": SynthScenario().to_json()}
    if args.out:
        obj["out_dir"] = args.out
    if args.seed is not None:
        obj["seed"] = args.seed
        if obj.get("scenario"):
            obj["scenario"]["rng_seed"] = args.seed
    return PipelineConfig.from_json(obj)


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    result = run_pipeline(cfg)
    print(f"report: {result.report_path}")
    report = result.report
    print(f"ARI: {report['ari']:.4f}")
    for n, v in report["top_n"].items():
        print(f"Top-{n}: {v:.4f}")
    if report["detector_ap"] is not None:
        print(f"detector AP@{report['ap_iou_thr']}: {report['detector_ap']:.4f}")
    return 0


def _cmd_export(args) -> int:
    from .embedder import load_model
    from .clustering import GmmModel
    from .tripletgen import load_sample_set

    run_dir = Path(args.run)
    model = load_model(run_dir / "stages" / "train" / "checkpoint.json")
    gmm = GmmModel.from_json(json.loads(
        (run_dir / "stages" / "cluster" / "gmm.json").read_text()))
    index = json.loads(
        (run_dir / "stages" / "samples" / "index.json").read_text())
    crops = []
    for name in index:
        crops.extend(load_sample_set(
            run_dir / "stages" / "samples" / "sample_sets" / name).crops)
    export_embeddings(model, crops, args.out, gmm=gmm)
    print(f"wrote {args.out} ({len(crops)} rows)")
    return 0


def _resolve_port(explicit: int | None) -> int:
    """--port wins; otherwise HERDID_PORT; otherwise the default."""
    if explicit is not None:
        return explicit
    return int(os.environ.get("HERDID_PORT", DEFAULT_PORT))


def _cmd_serve(args) -> int:
    port = _resolve_port(args.port)
    ui_dir = args.ui_dir
    if ui_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = bundled if bundled.is_dir() else None
    server = serve_labels(args.state, port=port, ui_dir=ui_dir)
    host, real_port = server.server_address
    print(f"label service on http://{host}:{real_port}/ (state: {args.state})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _cmd_synth(args) -> int:
    scenario = SynthScenario(n_individuals=args.identities,
                             n_videos=args.videos, rng_seed=args.seed)
    herd = generate_herd(args.identities, rng_seed=args.seed,
                         n_unenrollable=args.unenrollable)
    export_dataset(herd, scenario, args.out, save_frames=not args.no_frames,
                   noise=DetectorNoise())
    print(f"synthetic dataset written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="herdid",
        description="Self-supervised visual re-identification pipeline for "
                    "individually patterned animals.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the pipeline end to end")
    p_run.add_argument("--config", help="pipeline config JSON file")
    p_run.add_argument("--out", help="output directory override")
    p_run.add_argument("--seed", type=int, help="global seed override")
    p_run.set_defaults(func=_cmd_run)

    p_export = sub.add_parser("export",
                              help="export training-crop embeddings as CSV")
    p_export.add_argument("--run", required=True, help="pipeline output dir")
    p_export.add_argument("--out", required=True, help="CSV destination")
    p_export.set_defaults(func=_cmd_export)

    p_serve = sub.add_parser("serve", help="serve the annotation-assist API")
    p_serve.add_argument("--state", required=True,
                         help="pipeline output dir with a completed run")
    p_serve.add_argument("--port", type=int, default=None,
                         help=f"port (default {DEFAULT_PORT}, or HERDID_PORT)")
    p_serve.add_argument("--ui-dir", default=None,
                         help="directory with the built UI bundle")
    p_serve.set_defaults(func=_cmd_serve)

    p_synth = sub.add_parser("synth",
                             help="write a synthetic dataset to disk")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--identities", type=int, default=20)
    p_synth.add_argument("--videos", type=int, default=60)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--unenrollable", type=int, default=0)
    p_synth.add_argument("--no-frames", action="store_true",
                         help="skip writing frame PNGs")
    p_synth.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
