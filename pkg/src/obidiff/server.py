"""HTTP API serving a study bundle to the browser UI.

Flat-file persistence: each session is an append-only JSONL log under
<bundle>/sessions/. Truth labels never leave the server until the report.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from pathlib import Path

from fastapi import FastAPI
from fastapi.responses import FileResponse, JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .study import (
    GENERATED,
    REAL,
    IncompleteSessionError,
    load_bundle_items,
    score_study,
    session_from_log,
)


class ResponseIn(BaseModel):
    session_id: str
    item_id: str
    choice: str


def _error(status: int, code: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": code, "detail": detail})


def create_app(bundle_dir: str | Path, static_dir: str | Path | None = None) -> FastAPI:
    bundle_dir = Path(bundle_dir)
    items = load_bundle_items(bundle_dir)
    item_ids = [it.item_id for it in items]
    paths = {it.item_id: bundle_dir / it.image_path for it in items}
    sessions_dir = bundle_dir / "sessions"
    sessions_dir.mkdir(parents=True, exist_ok=True)
    write_lock = threading.Lock()  # single-writer appends per process

    app = FastAPI(title="obidiff study server")

    def _append(session_id: str, record: dict) -> None:
        with write_lock:
            with open(sessions_dir / f"{session_id}.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")

    @app.get("/api/session")
    def new_session():
        session_id = uuid.uuid4().hex[:12]
        _append(session_id, {"event": "created", "timestamp": time.time()})
        return {"session_id": session_id, "items": item_ids, "n_items": len(item_ids)}

    @app.get("/api/session/{session_id}")
    def session_state(session_id: str):
        try:
            session = session_from_log(bundle_dir, session_id)
        except FileNotFoundError:
            return _error(404, "unknown-session", session_id)
        return {
            "session_id": session_id,
            "items": item_ids,
            "n_items": len(item_ids),
            "responses": {k: v["choice"] for k, v in session.responses.items()},
        }

    @app.get("/api/items/{item_id}")
    def get_item(item_id: str):
        path = paths.get(item_id)
        if path is None:
            return _error(404, "unknown-item", item_id)
        return FileResponse(path, media_type="image/png")

    @app.post("/api/responses")
    def post_response(body: ResponseIn):
        if body.choice not in (REAL, GENERATED):
            return _error(422, "bad-choice", f"choice must be '{REAL}' or '{GENERATED}'")
        if body.item_id not in paths:
            return _error(404, "unknown-item", body.item_id)
        try:
            session = session_from_log(bundle_dir, body.session_id)
        except FileNotFoundError:
            return _error(404, "unknown-session", body.session_id)
        if body.item_id in session.responses:
            return {
                "recorded": False,
                "warning": "item already answered; first answer kept",
                "choice": session.responses[body.item_id]["choice"],
            }
        _append(
            body.session_id,
            {
                "event": "response",
                "item_id": body.item_id,
                "choice": body.choice,
                "timestamp": time.time(),
            },
        )
        return {"recorded": True, "choice": body.choice}

    @app.get("/api/report")
    def report(session_id: str):
        try:
            session = session_from_log(bundle_dir, session_id)
        except FileNotFoundError:
            return _error(404, "unknown-session", session_id)
        try:
            # Serialized exactly like the offline scorer so a client that
            # saves the body verbatim matches `study-score` byte for byte.
            body = json.dumps(score_study(session), indent=1)
            return Response(content=body, media_type="application/json")
        except IncompleteSessionError as exc:
            return _error(
                409, "incomplete-session", f"{len(exc.unanswered)} items unanswered"
            )

    ui_dir = Path(static_dir) if static_dir else bundle_dir / "ui"
    if ui_dir.is_dir():
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app
