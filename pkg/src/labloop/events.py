"""Event-sourced session stream.

Every externally visible loop step becomes one EventEnvelope with a gapless
per-session sequence number; the terminal event is always last. Events are
persisted as JSONL beside the trial log and served to readers either as a
replay (events >= a sequence number) or a blocking tail for live streams.
Single writer (the session loop), many readers.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .serde import canonical_dumps, canonical_loads, sorted_deep

EVENT_KINDS = (
    "strategy_proposed",
    "critique",
    "code_state",
    "execution",
    "advisor_report",
    "reward",
    "gate_waiting",
    "terminal",
)


class EventLogError(Exception):
    pass


@dataclass(frozen=True)
class EventEnvelope:
    session_id: str
    seq: int
    kind: str
    payload: dict[str, Any]
    timestamp: float

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.seq < 1:
            raise ValueError("seq starts at 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "seq": self.seq,
            "kind": self.kind,
            "payload": sorted_deep(self.payload),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EventEnvelope":
        return cls(
            session_id=data["session_id"],
            seq=data["seq"],
            kind=data["kind"],
            payload=data.get("payload", {}),
            timestamp=data.get("timestamp", 0.0),
        )


class EventLog:
    """In-memory event list with JSONL persistence and blocking tails."""

    def __init__(self, session_id: str, clock: Callable[[], float], path: Path | None = None):
        self.session_id = session_id
        self._clock = clock
        self._path = Path(path) if path is not None else None
        self._events: list[EventEnvelope] = []
        self._cond = threading.Condition()
        self._terminal = False

    @property
    def terminal_seen(self) -> bool:
        with self._cond:
            return self._terminal

    def append(self, kind: str, payload: dict[str, Any]) -> EventEnvelope:
        with self._cond:
            if self._terminal:
                raise EventLogError("cannot append after the terminal event")
            envelope = EventEnvelope(
                session_id=self.session_id,
                seq=len(self._events) + 1,
                kind=kind,
                payload=payload,
                timestamp=self._clock(),
            )
            self._events.append(envelope)
            if self._path is not None:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(canonical_dumps(envelope.to_dict()) + "\n")
            if kind == "terminal":
                self._terminal = True
            self._cond.notify_all()
        return envelope

    def snapshot(self, from_seq: int = 1) -> list[EventEnvelope]:
        with self._cond:
            return [e for e in self._events if e.seq >= from_seq]

    def wait_beyond(self, last_seq: int, timeout: float | None = None) -> list[EventEnvelope]:
        """Block until events with seq > last_seq exist (or terminal/timeout)."""
        with self._cond:
            if len(self._events) <= last_seq and not self._terminal:
                self._cond.wait(timeout=timeout)
            return [e for e in self._events if e.seq > last_seq]


def read_events(path: Path) -> list[EventEnvelope]:
    events: list[EventEnvelope] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(EventEnvelope.from_dict(canonical_loads(line)))
            except (ValueError, KeyError) as exc:
                raise EventLogError(f"{path}:{lineno}: bad event line ({exc})") from exc
    for idx, event in enumerate(events, start=1):
        if event.seq != idx:
            raise EventLogError(f"{path}: event seq gap at position {idx} (got {event.seq})")
    return events
