"""Trial-history persistence: canonical JSONL, replay, regret reporting.

One line per trial record, fixed key order, explicit schema_version, so that
write -> replay -> write is byte-identical and golden-file tests are
possible. Appends go through a temp-file-plus-rename so a crash mid-append
leaves the previous log intact. Reporting recomputes regret and reward
deltas straight from the replayed history under both r* conventions (the
default ceiling of 100 and the best observed reward).
"""

from __future__ import annotations

import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .bandit import (
    EmptyHistoryError,
    TooShortHistoryError,
    TrialHistory,
    TrialRecord,
    empirical_regret,
    submartingale_deltas,
)
from .serde import canonical_dumps, canonical_loads

SCHEMA_VERSION = 1
DEFAULT_R_STAR = 100.0


class TrialLogError(Exception):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(message)


def record_to_line(record: TrialRecord, session_id: str) -> str:
    payload: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "session_id": session_id}
    payload.update(record.to_dict())
    return canonical_dumps(payload)


def line_to_record(line: str) -> tuple[TrialRecord, str, int]:
    data = canonical_loads(line)
    if not isinstance(data, dict):
        raise ValueError("log line must be a JSON object")
    version = data.pop("schema_version", None)
    if not isinstance(version, int) or version < 1:
        raise ValueError("missing or invalid schema_version")
    session_id = data.pop("session_id", "")
    if not session_id:
        raise ValueError("missing session_id")
    return TrialRecord.from_dict(data), session_id, version


_APPEND_LOCKS: dict[str, threading.Lock] = {}
_LOCKS_GUARD = threading.Lock()


def _lock_for(path: Path) -> threading.Lock:
    key = str(Path(path).resolve())
    with _LOCKS_GUARD:
        return _APPEND_LOCKS.setdefault(key, threading.Lock())


def append_line(path: Path, line: str) -> None:
    """Atomic append: rewrite to a temp file in-dir, then rename over."""
    path = Path(path)
    with _lock_for(path):
        existing = path.read_bytes() if path.exists() else b""
        payload = existing + line.encode("utf-8") + b"\n"
        fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp_name, path)
        except OSError:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise


def register_trial(record: TrialRecord, session_id: str, path: Path) -> None:
    append_line(path, record_to_line(record, session_id))


def write_history(history: TrialHistory, path: Path) -> None:
    lines = [record_to_line(record, history.session_id) for record in history.records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def replay(path: Path, partial: bool = False) -> TrialHistory:
    """Rebuild a TrialHistory from a log; corrupt lines error with line numbers."""
    path = Path(path)
    if not path.exists():
        raise TrialLogError(f"log file {path} does not exist")
    history: TrialHistory | None = None
    version_seen = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record, session_id, version = line_to_record(raw)
            except (ValueError, KeyError, TypeError) as exc:
                if partial:
                    import logging

                    logging.getLogger(__name__).warning(
                        "%s:%d: skipping corrupt trailing line (%s)", path, lineno, exc
                    )
                    break
                raise TrialLogError(f"{path}:{lineno}: {exc}", lineno=lineno) from exc
            if version < version_seen:
                raise TrialLogError(
                    f"{path}:{lineno}: schema_version decreased", lineno=lineno
                )
            version_seen = version
            if history is None:
                history = TrialHistory(session_id)
            elif history.session_id != session_id:
                raise TrialLogError(
                    f"{path}:{lineno}: session_id changed mid-file", lineno=lineno
                )
            history.append(record)
    if history is None:
        raise TrialLogError(f"log file {path} holds no records")
    return history


@dataclass(frozen=True)
class LogReport:
    session_id: str
    rewards: tuple[float, ...]
    deltas: tuple[float, ...]
    regret_vs_default: float
    regret_vs_best: float
    best_iteration: int
    best_reward: float
    r_star_default: float = DEFAULT_R_STAR

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "rewards": list(self.rewards),
            "deltas": list(self.deltas),
            "regret_vs_default": self.regret_vs_default,
            "regret_vs_best": self.regret_vs_best,
            "best_iteration": self.best_iteration,
            "best_reward": self.best_reward,
            "r_star_default": self.r_star_default,
        }


def report_history(history: TrialHistory, r_star: float = DEFAULT_R_STAR) -> LogReport:
    rewards = history.rewards()
    if not rewards:
        raise EmptyHistoryError("no rewards to report")
    try:
        deltas = tuple(submartingale_deltas(history))
    except TooShortHistoryError:
        deltas = ()
    best_reward = max(rewards)
    best_iteration = rewards.index(best_reward) + 1
    return LogReport(
        session_id=history.session_id,
        rewards=tuple(rewards),
        deltas=deltas,
        regret_vs_default=empirical_regret(history, r_star),
        regret_vs_best=empirical_regret(history, best_reward),
        best_iteration=best_iteration,
        best_reward=best_reward,
        r_star_default=r_star,
    )


def report(path: Path, r_star: float = DEFAULT_R_STAR) -> LogReport:
    return report_history(replay(path), r_star)
