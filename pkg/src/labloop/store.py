"""Code store: analyzed, chunked, indexed templates plus support modules.

Templates are persisted content-addressed (`store/templates/<hash>`) with a
single append-only JSONL manifest; chunks are line ranges chosen by the
splitter agent and repaired into an exact partition, so reassembling chunks
in order always reproduces the deposited source byte for byte. Retrieval
ranks by embedding similarity (backend endpoint) with a keyword-overlap
fallback when embeddings are unavailable. Modules form an acyclic dependency
graph; missing ones can be synthesized by the librarian agent, gated on a
syntactic validation command.
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import sys
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Sequence

from .backend import (
    Backend,
    BackendError,
    ChatRequest,
    EmbeddingError,
    MissingFixtureError,
    cosine,
    hash_embedding,
)
from .serde import canonical_dumps
from .structured import StructuredParseError, ask_structured, parse_json_object

if TYPE_CHECKING:
    from .intake import FormalProblem

logger = logging.getLogger(__name__)

SIMILARITY_FLOOR = 0.35
FALLBACK_WINDOW_LINES = 120


class StoreError(Exception):
    pass


class NoTemplateError(StoreError):
    pass


class DependencyCycleError(StoreError):
    pass


class GenerationError(StoreError):
    pass


class DepositPreconditionError(StoreError):
    pass


@dataclass(frozen=True)
class ChunkRecord:
    template_id: str
    ordinal: int
    start_line: int
    end_line: int
    text: str
    embedding: tuple[float, ...] | None = None


@dataclass(frozen=True)
class TemplateRecord:
    id: str
    source_text: str
    metadata: dict[str, Any]
    chunk_ids: tuple[str, ...]


@dataclass(frozen=True)
class ModuleRecord:
    id: str
    description: str
    source_text: str
    dependencies: tuple[str, ...] = ()
    provenance: str = "library"

    def __post_init__(self) -> None:
        if self.provenance not in ("library", "librarian_generated", "deposited"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "dependencies", tuple(self.dependencies))


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def reassemble(chunks: Sequence[ChunkRecord]) -> str:
    """Join chunk texts in ordinal order; exact inverse of partitioning."""
    ordered = sorted(chunks, key=lambda chunk: chunk.ordinal)
    return "\n".join(chunk.text for chunk in ordered)


def analyze_snippet(source: str, backend: Backend) -> dict[str, Any]:
    """Ask the analyzer for retrieval metadata; at minimum a description."""
    if not source.strip():
        raise StoreError("cannot analyze an empty source")
    from .scaffolding import ROLE_CHARTERS

    def parse(reply: str) -> dict[str, Any]:
        data = parse_json_object(reply)
        description = data.get("description")
        if not isinstance(description, str) or not description:
            raise ValueError("metadata requires a non-empty description")
        return data

    metadata, _ = ask_structured(
        backend,
        ChatRequest(
            role_id="analyzer",
            system_prompt=ROLE_CHARTERS["analyzer"],
            messages=(
                ("user",
                 "Extract retrieval metadata as JSON with keys description and, "
                 "for full solvers, equation and method. Code:\n" + source),
            ),
            response_schema="snippet_metadata",
        ),
        parse,
    )
    return metadata


def _fallback_partition(line_count: int) -> list[tuple[int, int]]:
    ranges = []
    start = 1
    while start <= line_count:
        end = min(start + FALLBACK_WINDOW_LINES - 1, line_count)
        ranges.append((start, end))
        start = end + 1
    return ranges


def _repair_partition(
    proposed: list[tuple[int, int]], line_count: int
) -> tuple[list[tuple[int, int]], bool]:
    """Turn arbitrary proposed ranges into an exact partition of [1, n]."""
    cuts: set[int] = set()
    for _, end in proposed:
        clamped = min(max(int(end), 1), line_count)
        cuts.add(clamped)
    cuts.add(line_count)
    ordered = sorted(cuts)
    partition: list[tuple[int, int]] = []
    start = 1
    for cut in ordered:
        if cut < start:
            continue
        partition.append((start, cut))
        start = cut + 1
    repaired = partition != [(int(s), int(e)) for s, e in proposed]
    return partition, repaired


def split_script(source: str, backend: Backend) -> list[tuple[int, int]]:
    """Splitter-chosen chunk boundaries, always repaired to a valid partition."""
    lines = source.split("\n")
    line_count = len(lines)
    if line_count < 1 or not source:
        raise StoreError("cannot split an empty source")
    from .scaffolding import ROLE_CHARTERS

    def parse(reply: str) -> list[tuple[int, int]]:
        data = parse_json_object(reply)
        ranges = data.get("ranges")
        if not isinstance(ranges, list) or not ranges:
            raise ValueError("ranges must be a non-empty list")
        parsed = []
        for item in ranges:
            if not isinstance(item, dict):
                raise ValueError("each range must be an object")
            start = item.get("start_line")
            end = item.get("end_line")
            if not isinstance(start, int) or not isinstance(end, int):
                raise ValueError("start_line and end_line must be integers")
            parsed.append((start, end))
        return parsed

    try:
        proposed, _ = ask_structured(
            backend,
            ChatRequest(
                role_id="splitter",
                system_prompt=ROLE_CHARTERS["splitter"],
                messages=(
                    ("user",
                     f"The script has {line_count} lines (1-based). Choose chunk "
                     "boundaries at logical seams and reply with JSON "
                     "{\"ranges\": [{\"start_line\": int, \"end_line\": int}]}.\n\n"
                     + source),
                ),
                response_schema="chunk_ranges",
            ),
            parse,
        )
    except MissingFixtureError:
        raise
    except (BackendError, StructuredParseError):
        logger.warning("splitter unavailable; falling back to fixed windows")
        return _fallback_partition(line_count)
    partition, repaired = _repair_partition(proposed, line_count)
    if repaired:
        logger.warning("splitter ranges repaired into a valid partition")
    return partition


def make_chunks(
    template_id: str, source: str, ranges: Sequence[tuple[int, int]]
) -> list[ChunkRecord]:
    lines = source.split("\n")
    chunks = []
    for ordinal, (start, end) in enumerate(ranges):
        text = "\n".join(lines[start - 1 : end])
        chunks.append(
            ChunkRecord(
                template_id=template_id,
                ordinal=ordinal,
                start_line=start,
                end_line=end,
                text=text,
            )
        )
    return chunks


class CodeStore:
    """Content-addressed persistence with an append-only JSONL manifest."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.templates_dir = self.root / "templates"
        self.manifest_path = self.root / "manifest.jsonl"
        self.templates_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.templates: dict[str, TemplateRecord] = {}
        self.chunks: dict[str, list[ChunkRecord]] = {}
        self.modules: dict[str, ModuleRecord] = {}
        self._load()

    def _load(self) -> None:
        if not self.manifest_path.exists():
            return
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                if record["kind"] == "template":
                    source = (self.templates_dir / record["id"]).read_text(encoding="utf-8")
                    chunks = [
                        ChunkRecord(
                            template_id=record["id"],
                            ordinal=c["ordinal"],
                            start_line=c["start_line"],
                            end_line=c["end_line"],
                            text="\n".join(
                                source.split("\n")[c["start_line"] - 1 : c["end_line"]]
                            ),
                        )
                        for c in record["chunks"]
                    ]
                    self.chunks[record["id"]] = chunks
                    self.templates[record["id"]] = TemplateRecord(
                        id=record["id"],
                        source_text=source,
                        metadata=record["metadata"],
                        chunk_ids=tuple(
                            f"{record['id']}:{c.ordinal}" for c in chunks
                        ),
                    )
                elif record["kind"] == "module":
                    self.modules[record["id"]] = ModuleRecord(
                        id=record["id"],
                        description=record["description"],
                        source_text=record["source_text"],
                        dependencies=tuple(record.get("dependencies", ())),
                        provenance=record.get("provenance", "library"),
                    )

    def _append_manifest(self, record: dict[str, Any]) -> None:
        with open(self.manifest_path, "a", encoding="utf-8") as fh:
            fh.write(canonical_dumps(record) + "\n")

    def add_template(
        self,
        source: str,
        metadata: dict[str, Any],
        ranges: Sequence[tuple[int, int]],
    ) -> TemplateRecord:
        """Deposit a template; idempotent on identical content hash."""
        template_id = content_hash(source)
        with self._lock:
            if template_id in self.templates:
                return self.templates[template_id]
            chunks = make_chunks(template_id, source, ranges)
            if reassemble(chunks) != source:
                raise StoreError("chunk ranges do not partition the source")
            (self.templates_dir / template_id).write_text(source, encoding="utf-8")
            record = TemplateRecord(
                id=template_id,
                source_text=source,
                metadata=dict(metadata),
                chunk_ids=tuple(f"{template_id}:{c.ordinal}" for c in chunks),
            )
            self.templates[template_id] = record
            self.chunks[template_id] = chunks
            self._append_manifest(
                {
                    "kind": "template",
                    "id": template_id,
                    "metadata": dict(sorted(metadata.items())),
                    "chunks": [
                        {
                            "ordinal": c.ordinal,
                            "start_line": c.start_line,
                            "end_line": c.end_line,
                        }
                        for c in chunks
                    ],
                }
            )
            return record

    def add_module(self, module: ModuleRecord) -> ModuleRecord:
        with self._lock:
            existing = self.modules.get(module.id)
            if existing is not None and existing.source_text == module.source_text:
                return existing
            self.modules[module.id] = module
            self._append_manifest(
                {
                    "kind": "module",
                    "id": module.id,
                    "description": module.description,
                    "source_text": module.source_text,
                    "dependencies": list(module.dependencies),
                    "provenance": module.provenance,
                }
            )
            return module


@dataclass
class StoreIndex:
    """Searchable view over a store's templates."""

    store: CodeStore
    embeddings: dict[str, list[list[float]]] = field(default_factory=dict)
    embedding_degraded: bool = False

    def is_empty(self) -> bool:
        return not self.store.templates


def index_store(store: CodeStore, backend: Backend) -> StoreIndex:
    """Embed every chunk via the backend; degrade to keyword-only on failure."""
    index = StoreIndex(store=store)
    for template_id, chunks in store.chunks.items():
        texts = [chunk.text for chunk in chunks]
        if not texts:
            continue
        try:
            index.embeddings[template_id] = backend.embed(texts)
        except (EmbeddingError, BackendError) as exc:
            logger.warning("embedding failed (%s); keyword-only retrieval", exc)
            index.embedding_degraded = True
            index.embeddings.clear()
            break
    return index


def _keyword_score(query: str, template: TemplateRecord) -> float:
    from .backend import _tokenize

    query_tokens = set(_tokenize(query))
    if not query_tokens:
        return 0.0
    haystack = set(_tokenize(template.source_text))
    for value in template.metadata.values():
        haystack.update(_tokenize(str(value)))
    overlap = len(query_tokens & haystack)
    return overlap / len(query_tokens)


def _similarity(query: str, index: StoreIndex, template_id: str) -> float:
    rows = index.embeddings.get(template_id)
    if rows is None:
        return _keyword_score(query, index.store.templates[template_id])
    query_vec = hash_embedding(query)
    best = 0.0
    for row in rows:
        if len(row) != len(query_vec):
            return _keyword_score(query, index.store.templates[template_id])
        best = max(best, cosine(query_vec, row))
    return best


def retrieve_template(
    query: str,
    index: StoreIndex,
    metadata_filters: dict[str, str] | None = None,
    floor: float = SIMILARITY_FLOOR,
) -> TemplateRecord:
    """Best match above the floor, source reassembled from chunks."""
    if index.is_empty():
        raise NoTemplateError("store is empty")
    scored: list[tuple[float, str]] = []
    for template_id, template in index.store.templates.items():
        if metadata_filters:
            if any(
                str(template.metadata.get(key, "")) != value
                for key, value in metadata_filters.items()
            ):
                continue
        scored.append((_similarity(query, index, template_id), template_id))
    if not scored:
        raise NoTemplateError("no template passed the metadata filters")
    scored.sort(key=lambda item: (-item[0], item[1]))
    if len(scored) > 1:
        logger.info(
            "retrieval candidates: %s",
            ", ".join(f"{tid[:8]}={score:.3f}" for score, tid in scored[:3]),
        )
    best_score, best_id = scored[0]
    if best_score < floor:
        raise NoTemplateError(
            f"best similarity {best_score:.3f} below floor {floor:.2f}"
        )
    template = index.store.templates[best_id]
    rebuilt = reassemble(index.store.chunks[best_id])
    if rebuilt != template.source_text:
        raise StoreError(f"template {best_id} chunks do not reproduce its source")
    return TemplateRecord(
        id=template.id,
        source_text=rebuilt,
        metadata=template.metadata,
        chunk_ids=template.chunk_ids,
    )


def validate_template(
    template: TemplateRecord, problem: "FormalProblem", backend: Backend
) -> tuple[str, str]:
    """Method-vs-problem fit check; returns (verdict, rationale)."""
    if "method" not in template.metadata:
        raise StoreError("template lacks method metadata")
    from .scaffolding import ROLE_CHARTERS

    def parse(reply: str) -> tuple[str, str]:
        data = parse_json_object(reply)
        verdict = data.get("verdict")
        if verdict not in ("accepted", "mismatch"):
            raise ValueError("verdict must be accepted or mismatch")
        return verdict, str(data.get("rationale", ""))

    result, _ = ask_structured(
        backend,
        ChatRequest(
            role_id="validator",
            system_prompt=ROLE_CHARTERS["validator"],
            messages=(
                ("user",
                 f"Template method: {template.metadata.get('method')}\n"
                 f"Template equation: {template.metadata.get('equation', 'unknown')}\n"
                 f"Problem: {problem.pde_or_task}\nDomain: {problem.domain_spec}\n"
                 "Reply with JSON {\"verdict\": \"accepted\"|\"mismatch\", "
                 "\"rationale\": str} citing the selection rule you applied."),
            ),
            response_schema="template_verdict",
        ),
        parse,
    )
    return result


@dataclass(frozen=True)
class ModuleCollection:
    found: tuple[ModuleRecord, ...]
    missing: tuple[str, ...]


def collect_modules(names: Sequence[str], store: CodeStore) -> ModuleCollection:
    """Requested modules plus transitive deps, topologically ordered."""
    if not names:
        raise StoreError("names must be non-empty")
    missing: list[str] = []
    ordered: list[ModuleRecord] = []
    state: dict[str, str] = {}

    def visit(name: str, trail: tuple[str, ...]) -> None:
        if state.get(name) == "done":
            return
        if state.get(name) == "visiting":
            cycle = " -> ".join(trail + (name,))
            raise DependencyCycleError(f"module dependency cycle: {cycle}")
        module = store.modules.get(name)
        if module is None:
            if name not in missing:
                missing.append(name)
            return
        state[name] = "visiting"
        for dep in module.dependencies:
            visit(dep, trail + (name,))
        state[name] = "done"
        ordered.append(module)

    for name in names:
        visit(name, ())
    return ModuleCollection(found=tuple(ordered), missing=tuple(missing))


DEFAULT_VALIDATION_COMMAND = (sys.executable, "-m", "py_compile")


def syntactic_check(source: str, command: Sequence[str] = DEFAULT_VALIDATION_COMMAND) -> str | None:
    """Run the configured parse-only validation; returns stderr on failure."""
    with tempfile.NamedTemporaryFile("w", suffix=".py", delete=False) as handle:
        handle.write(source)
        path = handle.name
    try:
        result = subprocess.run(
            list(command) + [path], capture_output=True, text=True, timeout=30
        )
    finally:
        Path(path).unlink(missing_ok=True)
    if result.returncode != 0:
        return result.stderr.strip() or "validation command failed"
    return None


def generate_missing_module(
    spec_text: str,
    compat_context: str,
    backend: Backend,
    store: CodeStore,
    validation_command: Sequence[str] = DEFAULT_VALIDATION_COMMAND,
) -> ModuleRecord:
    """Librarian path: synthesize, syntax-check, one repair round, persist."""
    if not spec_text.strip():
        raise StoreError("module spec must name the missing component")
    module_id = slug_from_spec(spec_text)
    existing = store.modules.get(module_id)
    if existing is not None:
        return existing
    from .scaffolding import ROLE_CHARTERS

    def parse(reply: str) -> tuple[str, str]:
        data = parse_json_object(reply)
        source = data.get("source")
        description = data.get("description", spec_text)
        if not isinstance(source, str) or not source.strip():
            raise ValueError("source must be non-empty")
        return source, str(description)

    request = ChatRequest(
        role_id="librarian",
        system_prompt=ROLE_CHARTERS["librarian"],
        messages=(
            ("user",
             f"Write the module named {module_id!r}.\nSpec: {spec_text}\n"
             f"It must interoperate with:\n{compat_context}\n"
             "Reply with JSON {\"source\": str, \"description\": str}."),
        ),
        response_schema="module_source",
    )
    failure = ""
    for attempt in range(2):
        try:
            (source, description), _ = ask_structured(backend, request, parse)
        except StructuredParseError as exc:
            raise GenerationError(str(exc)) from exc
        failure = syntactic_check(source, validation_command) or ""
        if not failure:
            module = ModuleRecord(
                id=module_id,
                description=description,
                source_text=source,
                provenance="librarian_generated",
            )
            return store.add_module(module)
        if attempt == 0:
            request = ChatRequest(
                role_id="librarian",
                system_prompt=request.system_prompt,
                messages=request.messages
                + (
                    ("assistant", source),
                    ("user", f"That code failed validation:\n{failure}\nFix it and "
                             "reply with the same JSON shape."),
                ),
                response_schema="module_source",
            )
    raise GenerationError(f"module {module_id!r} failed validation twice: {failure}")


def slug_from_spec(spec_text: str) -> str:
    from .sandbox import slugify

    first = spec_text.strip().splitlines()[0]
    slug = slugify(first)
    return slug[:60] or "module_" + content_hash(spec_text)[:8]


def deposit_validated(
    code_state_source: str,
    metadata_hint: dict[str, Any],
    store: CodeStore,
    backend: Backend,
    session_status: str,
) -> TemplateRecord:
    """Feed a successful session's final code back into the store."""
    if session_status != "succeeded":
        raise DepositPreconditionError(
            f"deposits require a succeeded session, got {session_status!r}"
        )
    try:
        metadata = analyze_snippet(code_state_source, backend)
    except MissingFixtureError:
        raise
    except (BackendError, StructuredParseError, StoreError) as exc:
        logger.warning("analysis failed on deposit (%s); storing minimal metadata", exc)
        first_line = code_state_source.strip().splitlines()[0][:120] if code_state_source.strip() else ""
        metadata = {"description": first_line or "deposited code state"}
    metadata = {**metadata_hint, **metadata}
    try:
        ranges = split_script(code_state_source, backend)
    except StoreError:
        ranges = [(1, len(code_state_source.split("\n")))]
    return store.add_template(code_state_source, metadata, ranges)
