"""Annotation-assist HTTP service.

Serves the next unlabelled tracklet with its Top-N candidate identities,
accepts label submissions into an append-only JSON-lines file (replayed on
boot, so restarts lose nothing), reports labelling metrics, and serves crop
PNGs plus the optional UI bundle as static files.

Endpoints (JSON, UTF-8):
    GET  /api/tracklets/next[?n=N]   next unlabelled tracklet; 204 when done
    GET  /api/identities             enrolled identities with exemplar crops
    POST /api/labels                 record one LabelRecord (422 on unknown ids)
    GET  /api/metrics                labels done + hit-rate at rank <= N
    GET  /files/...                  artifacts below the run directory
    GET  /ui/...                     built frontend bundle, when present
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

logger = logging.getLogger(__name__)

DEFAULT_PORT = 8377
NOT_IN_LIST = "not-in-list"
NEW_IDENTITY = "new-identity"


@dataclass
class LabelRecord:
    """One annotation: which identity a tracklet shows, found at which rank."""

    tracklet_id: int
    chosen_identity: object          # enrolled id, or NEW_IDENTITY
    rank: object                     # 1-based int, or NOT_IN_LIST
    annotator: str
    timestamp: str

    def to_json(self) -> dict:
        return asdict(self)


class LabelStore:
    """Append-only, fsynced JSON-lines label log with replay on boot."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.records: list[LabelRecord] = []
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    row = json.loads(line)
                    self.records.append(LabelRecord(**row))

    def labelled_ids(self) -> set:
        return {r.tracklet_id for r in self.records}

    def append(self, record: LabelRecord) -> None:
        with self._lock:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self.records.append(record)

    def metrics(self, grid=(1, 2, 4, 8, 16)) -> dict:
        total = len(self.records)
        ranks = [r.rank for r in self.records]
        hit_rate = {}
        for n in grid:
            hits = sum(1 for r in ranks if isinstance(r, int) and 1 <= r <= n)
            hit_rate[str(n)] = hits / total if total else 0.0
        histogram: dict[str, int] = {}
        for r in ranks:
            key = str(r)
            histogram[key] = histogram.get(key, 0) + 1
        return {"labels": total, "hit_rate": hit_rate,
                "rank_histogram": histogram}


class LabelService:
    """State and request logic, kept separate from the HTTP plumbing."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        state_path = self.run_dir / "stages" / "label_state" / "service.json"
        if not state_path.exists():
            raise FileNotFoundError(
                f"no label service state at {state_path}; run the pipeline first")
        self.state = json.loads(state_path.read_text())
        self.default_n = int(self.state.get("top_n", 4))
        self.tracklets = {int(t["tracklet_id"]): t
                          for t in self.state["tracklets"]}
        self.order = [int(t["tracklet_id"]) for t in self.state["tracklets"]]
        self.identities = {entry["identity_id"]: entry
                           for entry in self.state["identities"]}
        self.store = LabelStore(self.run_dir / "labels.jsonl")

    def next_tracklet(self, n: int | None) -> dict | None:
        n = n or self.default_n
        if n < 1:
            raise ValueError("n must be >= 1")
        done = self.store.labelled_ids()
        for tracklet_id in self.order:
            if tracklet_id in done:
                continue
            entry = self.tracklets[tracklet_id]
            candidates = entry["candidates"][:n]
            exemplars = {ident["identity_id"]: ident["exemplar_urls"]
                         for ident in self.state["identities"]}
            return {
                "tracklet_id": tracklet_id,
                "video_id": entry["video_id"],
                "crop_urls": entry["crop_urls"],
                "candidates": [
                    {"identity_id": c["identity_id"],
                     "confidence": c["confidence"],
                     "exemplar_urls": exemplars.get(c["identity_id"], [])}
                    for c in candidates],
                "n": len(candidates),
                "total_identities": len(self.identities),
                "remaining": len(self.order) - len(done),
            }
        return None

    def submit_label(self, body: dict) -> LabelRecord:
        tracklet_id = body.get("tracklet_id")
        if not isinstance(tracklet_id, int) or tracklet_id not in self.tracklets:
            raise LookupError(f"unknown tracklet {tracklet_id!r}")
        identity = body.get("identity_id")
        new_identity = bool(body.get("new_identity"))
        if new_identity:
            identity = NEW_IDENTITY
        elif identity not in self.identities:
            raise LookupError(f"unknown identity {identity!r}")
        rank = body.get("rank", NOT_IN_LIST)
        if rank != NOT_IN_LIST and (not isinstance(rank, int) or rank < 1):
            raise ValueError(f"rank must be a 1-based integer or {NOT_IN_LIST!r}")
        record = LabelRecord(
            tracklet_id=tracklet_id,
            chosen_identity=identity,
            rank=rank,
            annotator=str(body.get("annotator", "anonymous")),
            timestamp=body.get("timestamp")
            or datetime.now(timezone.utc).isoformat(),
        )
        self.store.append(record)
        return record

    def identities_payload(self) -> list[dict]:
        return self.state["identities"]

    def metrics(self) -> dict:
        return self.store.metrics()


def _make_handler(service: LabelService, ui_dir: Path | None):
    run_dir = service.run_dir.resolve()

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("http: " + fmt, *args)

        def _send_json(self, obj, status=200):
            data = json.dumps(obj).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _send_empty(self, status):
            self.send_response(status)
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _send_file(self, root: Path, rel: str):
            target = (root / rel.lstrip("/")).resolve()
            if not str(target).startswith(str(root.resolve())) \
                    or not target.is_file():
                self._send_json({"error": "not found"}, 404)
                return
            suffix = target.suffix.lower()
            ctype = {".png": "image/png", ".json": "application/json",
                     ".html": "text/html; charset=utf-8",
                     ".js": "text/javascript; charset=utf-8",
                     ".css": "text/css; charset=utf-8",
                     ".csv": "text/csv"}.get(suffix, "application/octet-stream")
            data = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            parsed = urlparse(self.path)
            path = parsed.path
            try:
                if path == "/api/tracklets/next":
                    query = parse_qs(parsed.query)
                    n = int(query["n"][0]) if "n" in query else None
                    payload = service.next_tracklet(n)
                    if payload is None:
                        self._send_empty(204)
                    else:
                        self._send_json(payload)
                elif path == "/api/identities":
                    self._send_json(service.identities_payload())
                elif path == "/api/metrics":
                    self._send_json(service.metrics())
                elif path.startswith("/files/"):
                    self._send_file(run_dir, path[len("/files/"):])
                elif ui_dir is not None and path.startswith("/ui"):
                    rel = path[len("/ui"):].lstrip("/") or "index.html"
                    self._send_file(ui_dir, rel)
                elif path == "/":
                    if ui_dir is not None:
                        self.send_response(302)
                        self.send_header("Location", "/ui/")
                        self.send_header("Content-Length", "0")
                        self.end_headers()
                    else:
                        self._send_json({"service": "herdid-labels",
                                         "endpoints": ["/api/tracklets/next",
                                                       "/api/identities",
                                                       "/api/labels",
                                                       "/api/metrics"]})
                else:
                    self._send_json({"error": "not found"}, 404)
            except ValueError as exc:
                self._send_json({"error": str(exc)}, 400)
            except Exception as exc:  # pragma: no cover - defensive
                logger.exception("request failed")
                self._send_json({"error": str(exc)}, 500)

        def do_POST(self):
            if urlparse(self.path).path != "/api/labels":
                self._send_json({"error": "not found"}, 404)
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
                record = service.submit_label(body)
                self._send_json(record.to_json(), 201)
            except LookupError as exc:
                self._send_json({"error": str(exc)}, 422)
            except (ValueError, json.JSONDecodeError) as exc:
                self._send_json({"error": str(exc)}, 422)
            except Exception as exc:  # pragma: no cover - defensive
                logger.exception("label submission failed")
                self._send_json({"error": str(exc)}, 500)

    return Handler


def serve_labels(run_dir, port: int = DEFAULT_PORT,
                 ui_dir=None) -> ThreadingHTTPServer:
    """Bind the label service; the caller decides when to serve_forever().

    Port 0 binds an ephemeral port (the returned server knows the real one).
    The HERDID_PORT environment variable overrides the default port when the
    caller passes none explicitly (handled by the CLI).
    """
    service = LabelService(Path(run_dir))
    ui_path = Path(ui_dir) if ui_dir else None
    if ui_path is not None and not ui_path.is_dir():
        logger.warning("UI directory %s missing; serving API only", ui_path)
        ui_path = None
    handler = _make_handler(service, ui_path)
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    server.service = service  # exposes state to tests and the CLI
    return server
