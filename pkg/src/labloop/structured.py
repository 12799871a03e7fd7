"""Structured replies from free-text backends.

Agents that must return machine-readable output get exactly one re-ask: the
first failure is echoed back with the validation error appended, and a second
failure raises. Transport-level retry lives in the backend; this layer never
retries transport errors.
"""

from __future__ import annotations

import json
from typing import Any, Callable, TypeVar

from .backend import Backend, BackendError, ChatRequest, ChatResponse

T = TypeVar("T")


class StructuredParseError(BackendError):
    """A role failed to produce schema-valid output, re-ask included."""

    def __init__(self, role_id: str, detail: str, raw: str):
        self.role_id = role_id
        self.raw = raw
        super().__init__(f"role {role_id!r} reply failed validation: {detail}")


def parse_json_object(text: str) -> dict[str, Any]:
    """Parse a JSON object, tolerating surrounding prose or code fences."""
    stripped = text.strip()
    try:
        data = json.loads(stripped)
    except json.JSONDecodeError:
        start = stripped.find("{")
        end = stripped.rfind("}")
        if start == -1 or end <= start:
            raise ValueError("no JSON object found in reply")
        data = json.loads(stripped[start : end + 1])
    if not isinstance(data, dict):
        raise ValueError("reply must be a JSON object")
    return data


def ask_structured(
    backend: Backend,
    request: ChatRequest,
    parse: Callable[[str], T],
    retries: int = 1,
) -> tuple[T, ChatResponse]:
    """Call the backend, validate with `parse`, re-ask once on schema failure."""
    attempts = retries + 1
    current = request
    last_exc: Exception | None = None
    last_text = ""
    for attempt in range(attempts):
        response = backend.complete(current)
        last_text = response.text
        try:
            return parse(response.text), response
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
            last_exc = exc
            if attempt < attempts - 1:
                current = ChatRequest(
                    role_id=request.role_id,
                    system_prompt=request.system_prompt,
                    messages=request.messages
                    + (
                        ("assistant", response.text),
                        (
                            "user",
                            f"Your reply failed validation: {exc}. "
                            "Reply again with only the corrected JSON.",
                        ),
                    ),
                    attachments=request.attachments,
                    response_schema=request.response_schema,
                    budget=request.budget,
                )
    raise StructuredParseError(request.role_id, str(last_exc), last_text)
