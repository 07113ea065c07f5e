"""Session-oriented local HTTP API for the companion UI.

All non-image bodies are JSON (schema v1, documented in the README).
Each session's optimization runs on its own worker thread; the registry
is guarded by one lock and sessions move idle -> running -> done|failed.
"""

from __future__ import annotations

import io
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .config import EngineConfig, build_engine, drag_config_from_settings
from .engine import EditResult
from .softmask import PointPair, generate_soft_mask, mask_to_image
from .toydiffusion import LATENT_FACTOR

API_SCHEMA_VERSION = 1
LOSS_TAIL = 20


@dataclass
class SessionRecord:
    """One editing session: source image, pair list, status, artifacts."""

    session_id: str
    image: np.ndarray
    pairs: list = field(default_factory=list)
    status: str = "idle"  # idle -> running -> done | failed
    error: Optional[str] = None
    result: Optional[EditResult] = None


class SessionRegistry:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._sessions: dict = {}

    def create(self, image: np.ndarray) -> SessionRecord:
        record = SessionRecord(session_id=uuid.uuid4().hex, image=image)
        with self._lock:
            self._sessions[record.session_id] = record
        return record

    def get(self, session_id: str) -> Optional[SessionRecord]:
        with self._lock:
            return self._sessions.get(session_id)

    def remove(self, session_id: str) -> bool:
        with self._lock:
            return self._sessions.pop(session_id, None) is not None

    def try_start(self, session_id: str) -> Optional[str]:
        """Atomically move idle/done/failed -> running; returns an error
        string when the transition is not allowed."""
        with self._lock:
            record = self._sessions.get(session_id)
            if record is None:
                return "unknown session"
            if record.status == "running":
                return "session is already running"
            record.status = "running"
            record.error = None
            return None


def _png_response(img: Image.Image) -> Response:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def _validate_pairs(payload, width: int, height: int):
    """Returns (pairs, problems); problems list offending entries."""
    problems = []
    pairs = []
    if not isinstance(payload, dict) or "pairs" not in payload:
        return None, [{"entry": None, "reason": "body must be {\"pairs\": [...]}"}]
    items = payload["pairs"]
    if not isinstance(items, list):
        return None, [{"entry": None, "reason": "pairs must be a list"}]
    for i, entry in enumerate(items):
        if not isinstance(entry, dict) or set(entry) != {"handle", "target"}:
            problems.append({"entry": i, "reason": "needs exactly handle and target"})
            continue
        ok = True
        for name in ("handle", "target"):
            pt = entry[name]
            if not isinstance(pt, list) or len(pt) != 2 or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in pt
            ):
                problems.append({"entry": i, "reason": f"{name} must be two integers"})
                ok = False
            elif not (0 <= pt[0] < width and 0 <= pt[1] < height):
                problems.append(
                    {"entry": i, "reason": f"{name} {pt} outside {width}x{height} image"}
                )
                ok = False
        if ok:
            pairs.append(PointPair(handle=tuple(entry["handle"]), target=tuple(entry["target"])))
    if problems:
        return None, problems
    return pairs, []


def create_app(config: Optional[EngineConfig] = None, seed: int = 0, workers: int = 4) -> FastAPI:
    config = config or EngineConfig()
    engine = build_engine(config, seed=seed)
    registry = SessionRegistry()
    executor = ThreadPoolExecutor(max_workers=workers)
    app = FastAPI(title="dragkit", version=str(API_SCHEMA_VERSION))

    def _not_found() -> JSONResponse:
        return JSONResponse(status_code=404, content={"error": "unknown session"})

    @app.post("/sessions")
    async def create_session(request: Request):
        body = await request.body()
        try:
            with Image.open(io.BytesIO(body)) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        except Exception:
            return JSONResponse(status_code=422, content={"error": "body must be a decodable image"})
        h, w = rgb.shape[:2]
        if h % LATENT_FACTOR or w % LATENT_FACTOR:
            return JSONResponse(
                status_code=422,
                content={"error": f"image {w}x{h} not divisible by {LATENT_FACTOR}"},
            )
        record = registry.create(rgb)
        return {"id": record.session_id, "width": w, "height": h}

    @app.post("/sessions/{session_id}/pairs")
    async def set_pairs(session_id: str, request: Request):
        record = registry.get(session_id)
        if record is None:
            return _not_found()
        try:
            payload = await request.json()
        except Exception:
            return JSONResponse(status_code=422, content={"error": "body must be JSON"})
        h, w = record.image.shape[:2]
        pairs, problems = _validate_pairs(payload, w, h)
        if problems:
            return JSONResponse(status_code=422, content={"error": "invalid pairs", "problems": problems})
        record.pairs = pairs
        return {"count": len(pairs)}

    @app.get("/sessions/{session_id}/mask")
    def get_mask(session_id: str):
        record = registry.get(session_id)
        if record is None:
            return _not_found()
        if not record.pairs:
            return JSONResponse(status_code=422, content={"error": "no pairs set"})
        h, w = record.image.shape[:2]
        mask = generate_soft_mask(record.pairs, (h, w), config.drag.mask_sigma)
        return _png_response(mask_to_image(mask))

    @app.post("/sessions/{session_id}/run")
    def run(session_id: str):
        record = registry.get(session_id)
        if record is None:
            return _not_found()
        if not record.pairs:
            return JSONResponse(status_code=422, content={"error": "no pairs set"})
        error = registry.try_start(session_id)
        if error == "unknown session":
            return _not_found()
        if error is not None:
            return JSONResponse(status_code=409, content={"error": error})

        def work() -> None:
            try:
                result = engine.edit(
                    record.image,
                    record.pairs,
                    drag_config=drag_config_from_settings(config.drag),
                )
                record.result = result
                record.status = "done"
            except Exception as exc:  # failure diagnostics are retained
                record.error = str(exc)
                record.status = "failed"

        executor.submit(work)
        return {"status": "running"}

    @app.get("/sessions/{session_id}/status")
    def status(session_id: str):
        record = registry.get(session_id)
        if record is None:
            return _not_found()
        body = {
            "status": record.status,
            "error": record.error,
            "schema": API_SCHEMA_VERSION,
        }
        if record.result is not None:
            report = record.result.report
            body["mean_distance"] = report.mean_distance
            body["converged"] = report.converged
            body["final_handles"] = report.final_handles
            body["losses"] = report.iterations[-LOSS_TAIL:]
        return body

    @app.get("/sessions/{session_id}/result")
    def result(session_id: str):
        record = registry.get(session_id)
        if record is None:
            return _not_found()
        if record.status != "done" or record.result is None:
            return JSONResponse(status_code=409, content={"error": f"session is {record.status}"})
        data = np.round(255.0 * np.clip(record.result.image, 0.0, 1.0)).astype(np.uint8)
        return _png_response(Image.fromarray(data, mode="RGB"))

    @app.delete("/sessions/{session_id}")
    def delete(session_id: str):
        if not registry.remove(session_id):
            return _not_found()
        return {"deleted": True}

    ui_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if ui_dir.is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
