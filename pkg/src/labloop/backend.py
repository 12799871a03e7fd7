"""LLM backend layer: a deterministic fixture-driven mock and a live HTTP client.

Every agent call goes through the Backend interface so the whole engine can
run offline. The mock backend replays a recorded transcript keyed by
(role_id, per-role call ordinal); the HTTP backend speaks an OpenAI-style
chat-completions dialect with per-provider concurrency caps and exponential
backoff on transient failures only. Credentials come from environment
variables and are never echoed into logs or exceptions.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import httpx

EMBED_DIM = 64


class BackendError(Exception):
    """Base class for backend failures."""


class MissingFixtureError(BackendError):
    def __init__(self, role_id: str, seq: int):
        self.role_id = role_id
        self.seq = seq
        super().__init__(f"no fixture entry for role {role_id!r} call #{seq}")


class FixtureParseError(BackendError):
    pass


class CapabilityError(BackendError):
    pass


class ProviderError(BackendError):
    def __init__(self, provider: str, status: int | None, detail: str):
        self.provider = provider
        self.status = status
        super().__init__(f"provider {provider!r} failed (status={status}): {detail}")


class EmbeddingError(BackendError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    """One agent call: role identity, system prompt, prior turns, extras."""

    role_id: str
    system_prompt: str
    messages: tuple[tuple[str, str], ...] = ()
    attachments: tuple[str, ...] = ()
    response_schema: str | None = None
    budget: int = 4096

    def __post_init__(self) -> None:
        if not self.role_id:
            raise ValueError("role_id must be non-empty")
        if not self.system_prompt:
            raise ValueError("system_prompt must be non-empty")
        object.__setattr__(self, "messages", tuple(tuple(m) for m in self.messages))
        object.__setattr__(self, "attachments", tuple(self.attachments))


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: TokenUsage
    model_id: str
    latency_seconds: float


class Backend(Protocol):
    """What the teams need from a language-model provider."""

    def supports_images(self, role_id: str) -> bool: ...

    def complete(self, request: ChatRequest) -> ChatResponse: ...

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


def estimate_tokens(text: str) -> int:
    """Cheap length heuristic used for budgets; roughly chars/4."""
    return len(text) // 4 + 1


def hash_embedding(text: str, dim: int = EMBED_DIM) -> list[float]:
    """Deterministic bag-of-words embedding; stable across processes."""
    vector = [0.0] * dim
    for token in _tokenize(text):
        digest = hashlib.blake2s(token.encode("utf-8"), digest_size=4).digest()
        vector[int.from_bytes(digest, "big") % dim] += 1.0
    norm = math.sqrt(sum(v * v for v in vector))
    if norm > 0.0:
        vector = [v / norm for v in vector]
    return vector


def _tokenize(text: str) -> list[str]:
    tokens = []
    word = []
    for ch in text.lower():
        if ch.isalnum() or ch == "_":
            word.append(ch)
        elif word:
            tokens.append("".join(word))
            word = []
    if word:
        tokens.append("".join(word))
    return tokens


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise ValueError("dimension mismatch")
    return sum(x * y for x, y in zip(a, b))


class MockBackend:
    """Replays a recorded transcript; deterministic and offline.

    The transcript is JSONL, one object per line with keys {role, seq, text}.
    seq is the per-role 1-based call ordinal. Each complete() call for a role
    advances that role's counter; a missing entry is an immediate hard error
    naming the role and ordinal so drifted fixtures fail loudly.
    """

    def __init__(self, entries: dict[tuple[str, int], str] | None = None):
        self._entries = dict(entries or {})
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()
        self.calls: list[tuple[str, int]] = []

    @classmethod
    def from_records(cls, records: Sequence[dict[str, Any]]) -> "MockBackend":
        entries: dict[tuple[str, int], str] = {}
        for idx, record in enumerate(records, start=1):
            key = (record["role"], int(record["seq"]))
            if key in entries:
                raise FixtureParseError(f"duplicate fixture key {key} at record {idx}")
            entries[key] = record["text"]
        return cls(entries)

    def supports_images(self, role_id: str) -> bool:
        return True

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            seq = self._counters.get(request.role_id, 0) + 1
            self._counters[request.role_id] = seq
            self.calls.append((request.role_id, seq))
            text = self._entries.get((request.role_id, seq))
        if text is None:
            raise MissingFixtureError(request.role_id, seq)
        return ChatResponse(
            text=text,
            usage=TokenUsage(
                prompt_tokens=estimate_tokens(request.system_prompt),
                completion_tokens=estimate_tokens(text),
            ),
            model_id="mock",
            latency_seconds=0.0,
        )

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [hash_embedding(text) for text in texts]

    @property
    def total_calls(self) -> int:
        return len(self.calls)


def load_fixture(path: str | Path) -> MockBackend:
    """Parse a JSONL transcript into a MockBackend; errors carry line numbers."""
    entries: dict[tuple[str, int], str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FixtureParseError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict):
                raise FixtureParseError(f"{path}:{lineno}: expected an object")
            missing = {"role", "seq", "text"} - set(record)
            if missing:
                raise FixtureParseError(
                    f"{path}:{lineno}: missing keys {sorted(missing)}"
                )
            key = (record["role"], int(record["seq"]))
            if key in entries:
                raise FixtureParseError(f"{path}:{lineno}: duplicate key {key}")
            entries[key] = record["text"]
    return MockBackend(entries)


DEFAULT_ROLE_TEMPERATURES = {
    "strategist": 0.7,
    "advisor": 0.4,
    "critic": 0.3,
}
_PARSER_TEMPERATURE = 0.0
TRANSIENT_STATUSES = frozenset({408, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class ProviderConfig:
    """One upstream endpoint; the API key is read from the named env var."""

    name: str
    base_url: str
    api_key_env: str = ""
    max_concurrency: int = 4
    timeout_seconds: float = 60.0
    chat_path: str = "/chat/completions"
    embed_path: str = "/embeddings"
    embed_model: str = ""


@dataclass(frozen=True)
class RoleBinding:
    """Routes one agent role to a provider/model pair."""

    provider: str
    model: str
    temperature: float | None = None
    supports_images: bool = False
    max_tokens: int = 4096


class HttpBackend:
    """OpenAI-style chat-completions client with retry and concurrency caps.

    Retries (exponential backoff) apply only to transport timeouts and
    transient HTTP statuses; schema or validation problems in a reply are the
    caller's concern and are never retried here.
    """

    def __init__(
        self,
        providers: dict[str, ProviderConfig],
        roles: dict[str, RoleBinding],
        default_role: RoleBinding | None = None,
        *,
        getenv: Callable[[str], str | None] | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        max_attempts: int = 4,
        backoff_base: float = 0.5,
    ):
        import os

        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self._providers = dict(providers)
        self._roles = dict(roles)
        self._default_role = default_role
        self._getenv = getenv or os.environ.get
        self._sleep = sleep
        self._max_attempts = max_attempts
        self._backoff_base = backoff_base
        self._clients: dict[str, httpx.Client] = {}
        self._semaphores: dict[str, threading.Semaphore] = {}
        for name, cfg in self._providers.items():
            self._clients[name] = httpx.Client(
                base_url=cfg.base_url,
                timeout=cfg.timeout_seconds,
                transport=transport,
            )
            self._semaphores[name] = threading.Semaphore(cfg.max_concurrency)

    def close(self) -> None:
        for client in self._clients.values():
            client.close()

    def _binding(self, role_id: str) -> RoleBinding:
        binding = self._roles.get(role_id, self._default_role)
        if binding is None:
            raise BackendError(f"no provider binding for role {role_id!r}")
        return binding

    def supports_images(self, role_id: str) -> bool:
        try:
            return self._binding(role_id).supports_images
        except BackendError:
            return False

    def _headers(self, cfg: ProviderConfig) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if cfg.api_key_env:
            key = self._getenv(cfg.api_key_env)
            if not key:
                raise BackendError(
                    f"credential env var {cfg.api_key_env!r} for provider "
                    f"{cfg.name!r} is unset"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _temperature(self, role_id: str, binding: RoleBinding) -> float:
        if binding.temperature is not None:
            return binding.temperature
        if role_id.endswith("_parser") or role_id == "inspector":
            return _PARSER_TEMPERATURE
        return DEFAULT_ROLE_TEMPERATURES.get(role_id, 0.2)

    def _post_with_retry(
        self, provider: ProviderConfig, path: str, payload: dict[str, Any]
    ) -> httpx.Response:
        client = self._clients[provider.name]
        semaphore = self._semaphores[provider.name]
        last_detail = ""
        for attempt in range(1, self._max_attempts + 1):
            with semaphore:
                try:
                    response = client.post(path, json=payload, headers=self._headers(provider))
                except httpx.TimeoutException:
                    last_detail = "transport timeout"
                    response = None
                except httpx.HTTPError as exc:
                    raise ProviderError(provider.name, None, type(exc).__name__) from exc
            if response is not None:
                if response.status_code == 200:
                    return response
                last_detail = f"http {response.status_code}"
                if response.status_code not in TRANSIENT_STATUSES:
                    raise ProviderError(provider.name, response.status_code, "non-transient")
            if attempt < self._max_attempts:
                self._sleep(self._backoff_base * (2.0 ** (attempt - 1)))
        raise ProviderError(provider.name, None, f"retries exhausted ({last_detail})")

    def complete(self, request: ChatRequest) -> ChatResponse:
        binding = self._binding(request.role_id)
        if request.attachments and not binding.supports_images:
            raise CapabilityError(
                f"role {request.role_id!r} is bound to a model without image support"
            )
        provider = self._providers[binding.provider]
        messages: list[dict[str, Any]] = [{"role": "system", "content": request.system_prompt}]
        for speaker, text in request.messages:
            messages.append({"role": speaker, "content": text})
        if request.attachments:
            parts: list[dict[str, Any]] = [{"type": "text", "text": "attached plots"}]
            for url in request.attachments:
                parts.append({"type": "image_url", "image_url": {"url": url}})
            messages.append({"role": "user", "content": parts})
        payload = {
            "model": binding.model,
            "messages": messages,
            "temperature": self._temperature(request.role_id, binding),
            "max_tokens": min(request.budget, binding.max_tokens),
        }
        started = time.monotonic()
        response = self._post_with_retry(provider, provider.chat_path, payload)
        latency = time.monotonic() - started
        body = response.json()
        try:
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(provider.name, 200, "malformed completion body") from exc
        if not text:
            raise ProviderError(provider.name, 200, "empty completion text")
        return ChatResponse(
            text=text,
            usage=TokenUsage(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
            model_id=body.get("model", binding.model),
            latency_seconds=latency,
        )

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        binding = self._roles.get("embedder", self._default_role)
        if binding is None:
            raise EmbeddingError("no provider binding for role 'embedder'")
        provider = self._providers[binding.provider]
        if not provider.embed_model:
            raise EmbeddingError(f"provider {provider.name!r} has no embed_model configured")
        payload = {"model": provider.embed_model, "input": list(texts)}
        try:
            response = self._post_with_retry(provider, provider.embed_path, payload)
        except ProviderError as exc:
            raise EmbeddingError(str(exc)) from exc
        body = response.json()
        try:
            rows = sorted(body["data"], key=lambda item: item["index"])
            return [list(map(float, row["embedding"])) for row in rows]
        except (KeyError, TypeError) as exc:
            raise EmbeddingError("malformed embeddings body") from exc
