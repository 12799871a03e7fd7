"""HTTP surface: create sessions, stream events, intervene, fetch artifacts.

The loop is the only writer; every endpoint except create/intervene is
read-only. Event streaming uses server-sent events keyed by seq, so a client
that reconnects with its last seen seq loses nothing.
"""

from __future__ import annotations

import hashlib
import json
import mimetypes
import threading
from pathlib import Path
from typing import Any, Callable, Iterator

from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse

from .backend import Backend
from .config import ConfigError, SessionConfig, with_overrides
from .orchestrator import TERMINAL_STATUSES, GateMismatchError, SessionRunner
from .serde import canonical_dumps
from .store import CodeStore


class CapacityError(Exception):
    pass


class UnknownSessionError(Exception):
    pass


class SessionManager:
    """Owns the live runners; one background thread per session."""

    def __init__(
        self,
        base_config: SessionConfig,
        backend_factory: Callable[[SessionConfig], Backend],
        store: CodeStore | None = None,
    ):
        self._base_config = base_config
        self._backend_factory = backend_factory
        self._store = store
        self._sessions: dict[str, SessionRunner] = {}
        self._threads: dict[str, threading.Thread] = {}
        self._lock = threading.Lock()
        self._counter = 0

    def _active_count(self) -> int:
        return sum(
            1 for runner in self._sessions.values()
            if runner.status not in TERMINAL_STATUSES
        )

    def create(self, request_text: str, overrides: dict[str, Any]) -> str:
        if not isinstance(request_text, str) or not request_text.strip():
            raise ConfigError("request text must be a non-empty string")
        config = with_overrides(self._base_config, overrides)
        with self._lock:
            if self._active_count() >= config.capacity:
                raise CapacityError(
                    f"capacity {config.capacity} reached; retry later"
                )
            self._counter += 1
            session_id = self._derive_id(config, request_text, self._counter)
            runner = SessionRunner(
                config,
                self._backend_factory(config),
                store=self._store,
                session_id=session_id,
            )
            thread = threading.Thread(
                target=self._drive, args=(runner, request_text), daemon=True
            )
            self._sessions[session_id] = runner
            self._threads[session_id] = thread
        thread.start()
        return session_id

    @staticmethod
    def _derive_id(config: SessionConfig, request_text: str, counter: int) -> str:
        if config.session_id:
            return config.session_id
        if config.clock == "logical":
            digest = hashlib.sha256(request_text.encode("utf-8")).hexdigest()
            return f"s{digest[:10]}{counter:02d}"
        import uuid

        return uuid.uuid4().hex[:12]

    @staticmethod
    def _drive(runner: SessionRunner, request_text: str) -> None:
        try:
            runner.run(request_text)
        except Exception:
            import logging

            logging.getLogger(__name__).exception(
                "session %s loop raised", runner.session_id
            )

    def get(self, session_id: str) -> SessionRunner:
        with self._lock:
            runner = self._sessions.get(session_id)
        if runner is None:
            raise UnknownSessionError(session_id)
        return runner

    def join(self, session_id: str, timeout: float | None = None) -> None:
        with self._lock:
            thread = self._threads.get(session_id)
        if thread is not None:
            thread.join(timeout=timeout)

    def summaries(self) -> list[dict[str, Any]]:
        with self._lock:
            runners = list(self._sessions.values())
        return [_session_summary(r) for r in runners]


def _session_summary(runner: SessionRunner) -> dict[str, Any]:
    summary: dict[str, Any] = {
        "session_id": runner.session_id,
        "status": runner.status,
        "mode": runner.config.mode,
        "iterations": 0,
        "rewards": [],
        "pending_gate": runner.gates.waiting_gate,
    }
    if runner.error:
        summary["error"] = runner.error
    state = runner.state
    if state is not None:
        summary["iterations"] = len(state.history)
        summary["rewards"] = state.history.rewards()
        summary["title"] = state.problem.title
        if state.project_dir is not None:
            summary["project"] = state.project_dir.name
    return summary


def _sse_frame(seq: int, kind: str, payload: dict[str, Any]) -> str:
    data = canonical_dumps(payload)
    return f"id: {seq}\nevent: {kind}\ndata: {data}\n\n"


def create_app(manager: SessionManager) -> FastAPI:
    app = FastAPI(title="research loop service", docs_url=None, redoc_url=None)
    # The dashboard is a static page on another origin; no cookies involved.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(UnknownSessionError)
    async def unknown_session(_request: Request, exc: UnknownSessionError):
        return JSONResponse({"error": f"unknown session {exc}"}, status_code=404)

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request) -> JSONResponse:
        try:
            body = await request.json()
        except json.JSONDecodeError as exc:
            return JSONResponse({"error": f"body must be JSON: {exc}"}, status_code=400)
        if not isinstance(body, dict):
            return JSONResponse({"error": "body must be an object"}, status_code=400)
        text = body.get("request", "")
        overrides = body.get("config", {})
        if not isinstance(overrides, dict):
            return JSONResponse({"error": "config must be an object"}, status_code=400)
        try:
            session_id = manager.create(text, overrides)
        except ConfigError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        except CapacityError as exc:
            return JSONResponse({"error": str(exc)}, status_code=503)
        return JSONResponse({"session_id": session_id}, status_code=201)

    @app.get("/sessions")
    async def list_sessions() -> dict[str, Any]:
        return {"sessions": manager.summaries()}

    @app.get("/sessions/{session_id}")
    async def get_session(session_id: str) -> dict[str, Any]:
        return _session_summary(manager.get(session_id))

    @app.get("/sessions/{session_id}/events")
    async def stream_events(session_id: str, request: Request) -> StreamingResponse:
        runner = manager.get(session_id)
        raw_from = request.query_params.get("from", "0")
        try:
            from_seq = max(int(raw_from), 0)
        except ValueError:
            return JSONResponse(
                {"error": f"from must be an integer, got {raw_from!r}"}, status_code=400
            )

        def generate() -> Iterator[str]:
            last = from_seq - 1 if from_seq > 0 else 0
            # Intake may still be running; the log appears with the project dir.
            import time as _time

            waited = 0.0
            while runner.events is None:
                if runner.status in TERMINAL_STATUSES or waited > 30.0:
                    yield _sse_frame(
                        last + 1,
                        "terminal",
                        {"status": runner.status, "error": runner.error},
                    )
                    return
                _time.sleep(0.02)
                waited += 0.02
            log = runner.events
            while True:
                batch = log.snapshot(last + 1)
                if not batch:
                    if log.terminal_seen:
                        return
                    batch = log.wait_beyond(last, timeout=0.5)
                for event in batch:
                    yield _sse_frame(event.seq, event.kind, event.to_dict())
                    last = event.seq
                    if event.kind == "terminal":
                        return

        return StreamingResponse(generate(), media_type="text/event-stream")

    @app.post("/sessions/{session_id}/interventions")
    async def post_intervention(session_id: str, request: Request):
        runner = manager.get(session_id)
        try:
            body = await request.json()
        except json.JSONDecodeError as exc:
            return JSONResponse({"error": f"body must be JSON: {exc}"}, status_code=400)
        gate = body.get("gate", "") if isinstance(body, dict) else ""
        directive = body.get("directive", "") if isinstance(body, dict) else ""
        if not isinstance(gate, str) or not isinstance(directive, str):
            return JSONResponse(
                {"error": "gate and directive must be strings"}, status_code=400
            )
        try:
            ack = runner.inject_directive(gate, directive)
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        except GateMismatchError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)
        return ack

    @app.get("/sessions/{session_id}/trials")
    async def get_trials(session_id: str) -> dict[str, Any]:
        runner = manager.get(session_id)
        records: list[dict[str, Any]] = []
        if runner.state is not None:
            records = [r.to_dict() for r in runner.state.history.records]
        return {"session_id": runner.session_id, "records": records}

    @app.get("/sessions/{session_id}/artifacts/{iteration}/{name}")
    async def get_artifact(session_id: str, iteration: str, name: str):
        runner = manager.get(session_id)
        if runner.state is None or runner.state.project_dir is None:
            return JSONResponse({"error": "session has no artifacts yet"}, status_code=404)
        if "/" in name or "\\" in name or ".." in name or name.startswith("."):
            return JSONResponse({"error": "path rejected"}, status_code=400)
        try:
            iter_num = int(iteration)
        except ValueError:
            return JSONResponse({"error": "iteration must be an integer"}, status_code=400)
        records = runner.state.history.records
        if not (1 <= iter_num <= len(records)):
            return JSONResponse({"error": "unknown iteration"}, status_code=404)
        record = records[iter_num - 1]
        if not record.code_state_ref.path:
            return JSONResponse({"error": "iteration produced no files"}, status_code=404)
        rel = f"{record.code_state_ref.path.split('/')[0]}/{name}"
        if rel not in record.observation.artifact_paths:
            return JSONResponse({"error": "not in that iteration's manifest"}, status_code=404)
        project_dir = runner.state.project_dir.resolve()
        target = (project_dir / rel).resolve()
        try:
            target.relative_to(project_dir)
        except ValueError:
            return JSONResponse({"error": "path rejected"}, status_code=400)
        if not target.is_file():
            return JSONResponse({"error": "artifact file missing"}, status_code=404)
        blob = target.read_bytes()
        media = mimetypes.guess_type(name)[0] or "application/octet-stream"
        return Response(
            content=blob,
            media_type=media,
            headers={"X-Content-SHA256": hashlib.sha256(blob).hexdigest()},
        )

    return app
