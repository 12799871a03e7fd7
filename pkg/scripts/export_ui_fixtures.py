"""Capture the dashboard's test feeds straight off the HTTP surface.

Runs the recorded main and interactive sessions behind the real app and
saves, per session: the final summary, every server-sent event, and the
trial records. The dashboard tests replay these files; a companion test
under tests/ regenerates them in memory and fails on drift.
"""

import json
import sys
import tempfile
import time
from pathlib import Path

from fastapi.testclient import TestClient

from labloop.api import SessionManager, create_app
from labloop.backend import load_fixture
from labloop.config import SessionConfig
from labloop.sandbox import RuntimeConfig

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "tests" / "fixtures"
OUT_DIR = ROOT / "frontend" / "tests" / "fixtures"

REQUESTS = json.loads((FIXTURES / "requests.json").read_text(encoding="utf-8"))
TERMINAL = ("succeeded", "exhausted", "aborted")


def _manager(workdir: Path, fixture_name: str, **overrides) -> SessionManager:
    config = SessionConfig(
        clock="logical",
        runtime=RuntimeConfig(workdir_root=workdir, timeout_seconds=60.0),
        fixture_path=str(FIXTURES / fixture_name),
        **overrides,
    )
    return SessionManager(config, lambda cfg: load_fixture(cfg.fixture_path))


def _parse_frames(text: str) -> list[dict]:
    events = []
    for block in text.split("\n\n"):
        if block.strip():
            lines = block.split("\n")
            events.append(json.loads(lines[2][len("data: ") :]))
    return events


def _snapshot(client: TestClient, sid: str) -> dict:
    return {
        "session": client.get(f"/sessions/{sid}").json(),
        "events": _parse_frames(client.get(f"/sessions/{sid}/events").text),
        "trials": client.get(f"/sessions/{sid}/trials").json(),
    }


def capture_main(workdir: Path) -> dict:
    manager = _manager(workdir, "main_session.jsonl")
    client = TestClient(create_app(manager))
    resp = client.post("/sessions", json={"request": REQUESTS["main"]})
    sid = resp.json()["session_id"]
    manager.join(sid, timeout=30.0)
    return _snapshot(client, sid)


def capture_interactive(workdir: Path) -> dict:
    manager = _manager(workdir, "interactive_session.jsonl", mode="interactive")
    client = TestClient(create_app(manager))
    resp = client.post("/sessions", json={"request": REQUESTS["interactive"]})
    sid = resp.json()["session_id"]
    directive_sent = False
    deadline = time.monotonic() + 30.0
    while time.monotonic() < deadline:
        body = client.get(f"/sessions/{sid}").json()
        if body["status"] in TERMINAL:
            break
        gate = body["pending_gate"]
        if gate is None:
            time.sleep(0.005)
            continue
        directive = ""
        if gate == "post_advisor" and not directive_sent:
            directive = "jump straight to degree 6"
            directive_sent = True
        client.post(
            f"/sessions/{sid}/interventions",
            json={"gate": gate, "directive": directive},
        )
    manager.join(sid, timeout=10.0)
    return _snapshot(client, sid)


def capture_all(workdir: Path) -> dict[str, dict]:
    return {
        "main_session.json": capture_main(workdir / "main"),
        "interactive_session.json": capture_interactive(workdir / "interactive"),
    }


def render(data: dict) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        captured = capture_all(Path(tmp))
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    for name, data in captured.items():
        (OUT_DIR / name).write_text(render(data), encoding="utf-8")
        print(f"wrote frontend/tests/fixtures/{name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
