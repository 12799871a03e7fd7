"""Canonical JSON helpers shared by the trial log and the event log.

Persistence here is append-only JSONL, and replay tests compare files byte
for byte, so serialization has to be canonical: fixed key order from the
dataclass `to_dict` methods, free-form dicts sorted recursively, no ASCII
escaping, no NaN/Infinity.
"""

from __future__ import annotations

import json
from typing import Any


def sorted_deep(value: Any) -> Any:
    """Recursively sort dict keys so free-form payloads serialize stably."""
    if isinstance(value, dict):
        return {key: sorted_deep(value[key]) for key in sorted(value)}
    if isinstance(value, (list, tuple)):
        return [sorted_deep(item) for item in value]
    return value


def canonical_dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def canonical_loads(text: str) -> Any:
    return json.loads(text)
