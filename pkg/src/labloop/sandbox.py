"""Sandboxed execution: versioned run directories, subprocess capture, debugging.

Each session gets one project directory under the workdir root; every
execution (including debug retries) gets a fresh write-once `vNNN` directory.
Scripts run as subprocesses with cwd pinned inside the project, a restricted
environment, and a hard timeout. Machine-readable results come back through
a fixed `metrics.json` side channel; files matching the artifact patterns
are manifested with sizes and content hashes for integrity scoring.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

from .backend import Backend, BackendError, ChatRequest, MissingFixtureError
from .cells import CellScript, global_line_to_cell, render_cells
from .structured import StructuredParseError, ask_structured, parse_json_object

if TYPE_CHECKING:
    from .intake import FormalProblem

logger = logging.getLogger(__name__)

DEFAULT_ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "PYTHONHASHSEED")
METRICS_FILENAME = "metrics.json"


class SandboxError(Exception):
    pass


class ContainmentError(SandboxError):
    pass


@dataclass(frozen=True)
class RuntimeConfig:
    """How code states are run; defaults suit a local Python interpreter."""

    workdir_root: Path
    interpreter_command: tuple[str, ...] = (sys.executable,)
    timeout_seconds: float = 1800.0
    artifact_patterns: tuple[str, ...] = ("*.png", "*.npz", "*.csv", "*.mat")
    env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST
    main_filename: str = "main.py"

    def __post_init__(self) -> None:
        if self.timeout_seconds <= 0:
            raise ValueError("timeout must be positive")
        if not self.interpreter_command:
            raise ValueError("interpreter command must be non-empty")
        object.__setattr__(self, "workdir_root", Path(self.workdir_root))
        object.__setattr__(self, "interpreter_command", tuple(self.interpreter_command))
        object.__setattr__(self, "artifact_patterns", tuple(self.artifact_patterns))
        object.__setattr__(self, "env_allowlist", tuple(self.env_allowlist))


@dataclass(frozen=True)
class ExecutionOutcome:
    exit_code: int
    stdout_path: Path
    stderr_path: Path
    duration_seconds: float
    timed_out: bool
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ArtifactEntry:
    name: str
    size: int
    sha256: str


@dataclass(frozen=True)
class ArtifactManifest:
    entries: tuple[ArtifactEntry, ...]
    missing: tuple[str, ...]

    def names(self) -> list[str]:
        return [entry.name for entry in self.entries]


@dataclass(frozen=True)
class DebugReport:
    error_class: str
    suspect_cells: tuple[int, ...]
    fix_directive: str

    def __post_init__(self) -> None:
        if not self.fix_directive:
            raise ValueError("fix_directive must be non-empty")
        object.__setattr__(self, "suspect_cells", tuple(self.suspect_cells))


def slugify(text: str) -> str:
    slug = re.sub(r"[^a-z0-9_]+", "_", text.lower()).strip("_")
    return re.sub(r"_+", "_", slug)


def _fallback_name(problem: "FormalProblem") -> str:
    digest = hashlib.sha256(problem.title.encode("utf-8")).hexdigest()[:8]
    return f"prob_{digest}"


def assign_project_name(
    problem: "FormalProblem", backend: Backend, workdir_root: Path
) -> Path:
    """Name and create the session's project dir; called once per session."""
    from .scaffolding import ROLE_CHARTERS

    workdir_root = Path(workdir_root)
    workdir_root.mkdir(parents=True, exist_ok=True)

    def parse(reply: str) -> str:
        data = parse_json_object(reply)
        name = data.get("name")
        if not isinstance(name, str) or not name.strip():
            raise ValueError("name must be a non-empty string")
        return name

    try:
        name, _ = ask_structured(
            backend,
            ChatRequest(
                role_id="filing",
                system_prompt=ROLE_CHARTERS["filing"],
                messages=(
                    ("user",
                     f"Problem title: {problem.title}\nTask: {problem.pde_or_task}\n"
                     "Reply with JSON {\"name\": \"short_snake_case_project_name\"}."),
                ),
                response_schema="project_name",
            ),
            parse,
        )
    except MissingFixtureError:
        raise
    except (BackendError, StructuredParseError):
        name = _fallback_name(problem)
    slug = slugify(name) or _fallback_name(problem)
    candidate = slug
    counter = 1
    while (workdir_root / candidate).exists():
        counter += 1
        candidate = f"{slug}_{counter}"
    project_dir = workdir_root / candidate
    project_dir.mkdir()
    return project_dir


_VERSION_RE = re.compile(r"^v(\d+)$")


def next_version(project_dir: Path) -> Path:
    """Create and return the next write-once `vNNN` directory (max rule)."""
    project_dir = Path(project_dir)
    if not project_dir.is_dir():
        raise SandboxError(f"project dir {project_dir} does not exist")
    highest = 0
    for child in project_dir.iterdir():
        match = _VERSION_RE.match(child.name)
        if match:
            highest = max(highest, int(match.group(1)))
    version_dir = project_dir / f"v{highest + 1:03d}"
    version_dir.mkdir()
    return version_dir


def _contained(path: Path, root: Path) -> bool:
    try:
        path.resolve().relative_to(root.resolve())
        return True
    except ValueError:
        return False


def _parse_metrics(path: Path) -> dict[str, float]:
    if not path.exists():
        return {}
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, OSError) as exc:
        logger.warning("ignoring unreadable metrics file %s: %s", path, exc)
        return {}
    if not isinstance(raw, dict):
        logger.warning("ignoring non-object metrics file %s", path)
        return {}
    metrics: dict[str, float] = {}
    for key, value in raw.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            logger.warning("dropping non-numeric metric %r", key)
            continue
        value = float(value)
        if not math.isfinite(value):
            logger.warning("dropping non-finite metric %r", key)
            continue
        metrics[str(key)] = value
    return metrics


def execute(iteration_dir: Path, runtime: RuntimeConfig) -> ExecutionOutcome:
    """Run the iteration's main file as a subprocess; never raises on crash."""
    iteration_dir = Path(iteration_dir)
    if not _contained(iteration_dir, runtime.workdir_root):
        raise ContainmentError(
            f"iteration dir {iteration_dir} escapes workdir root {runtime.workdir_root}"
        )
    main_path = iteration_dir / runtime.main_filename
    if not main_path.exists():
        raise SandboxError(f"code state {main_path} not written")
    env = {key: os.environ[key] for key in runtime.env_allowlist if key in os.environ}
    stdout_path = iteration_dir / "stdout.log"
    stderr_path = iteration_dir / "stderr.log"
    started = time.monotonic()
    timed_out = False
    with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
        try:
            process = subprocess.Popen(
                list(runtime.interpreter_command) + [runtime.main_filename],
                cwd=str(iteration_dir),
                env=env,
                stdout=out,
                stderr=err,
            )
        except OSError as exc:
            raise SandboxError(f"failed to spawn interpreter: {exc}") from exc
        try:
            exit_code = process.wait(timeout=runtime.timeout_seconds)
        except subprocess.TimeoutExpired:
            timed_out = True
            process.kill()
            exit_code = process.wait()
    duration = time.monotonic() - started
    return ExecutionOutcome(
        exit_code=exit_code,
        stdout_path=stdout_path,
        stderr_path=stderr_path,
        duration_seconds=duration,
        timed_out=timed_out,
        metrics=_parse_metrics(iteration_dir / METRICS_FILENAME),
    )


def collect_artifacts(iteration_dir: Path, patterns: tuple[str, ...]) -> ArtifactManifest:
    """Manifest files matching the patterns; unmatched patterns are 'missing'."""
    iteration_dir = Path(iteration_dir)
    entries: dict[str, ArtifactEntry] = {}
    missing: list[str] = []
    for pattern in patterns:
        matched = sorted(iteration_dir.glob(pattern))
        if not matched:
            missing.append(pattern)
            continue
        for path in matched:
            if not path.is_file() or path.name in entries:
                continue
            data = path.read_bytes()
            entries[path.name] = ArtifactEntry(
                name=path.name,
                size=len(data),
                sha256=hashlib.sha256(data).hexdigest(),
            )
    ordered = tuple(entries[name] for name in sorted(entries))
    return ArtifactManifest(entries=ordered, missing=tuple(missing))


def _tail(path: Path, limit: int = 4000) -> str:
    try:
        data = path.read_bytes()
    except OSError:
        return ""
    return data[-limit:].decode("utf-8", errors="replace")


def log_excerpt(outcome: ExecutionOutcome, limit: int = 2000) -> str:
    parts = []
    out = _tail(outcome.stdout_path, limit)
    err = _tail(outcome.stderr_path, limit)
    if out:
        parts.append(out.strip())
    if err:
        parts.append("STDERR:\n" + err.strip())
    return "\n".join(parts)


_LINE_RE = re.compile(r"line (\d+)")


def traceback_cells(stderr_text: str, script: CellScript, main_filename: str) -> list[int]:
    """Map traceback line numbers for the main file onto cell indices."""
    suspects: list[int] = []
    for line in stderr_text.splitlines():
        if main_filename not in line:
            continue
        for match in _LINE_RE.finditer(line):
            cell = global_line_to_cell(script, int(match.group(1)))
            if cell is not None and cell not in suspects:
                suspects.append(cell)
    return suspects


def debug_report(
    outcome: ExecutionOutcome,
    script: CellScript,
    backend: Backend,
    main_filename: str = "main.py",
) -> DebugReport:
    """Classify a failed run and produce a directive plan_targets can consume."""
    if outcome.exit_code == 0 and not outcome.timed_out:
        raise SandboxError("debug_report requires a failed outcome")
    if outcome.timed_out:
        return DebugReport(
            error_class="timeout",
            suspect_cells=(),
            fix_directive=(
                "Execution hit the time limit. Reduce the work per run: fewer "
                "iterations, coarser resolution, or an early-exit check."
            ),
        )
    stderr_text = _tail(outcome.stderr_path)
    mapped = traceback_cells(stderr_text, script, main_filename)

    from .scaffolding import ROLE_CHARTERS

    def parse(reply: str) -> DebugReport:
        data = parse_json_object(reply)
        error_class = data.get("error_class")
        directive = data.get("fix_directive")
        if not isinstance(error_class, str) or not error_class:
            raise ValueError("error_class must be a non-empty string")
        if not isinstance(directive, str) or not directive:
            raise ValueError("fix_directive must be a non-empty string")
        suspects = list(mapped)
        for idx in data.get("suspect_cells", []):
            if isinstance(idx, bool) or not isinstance(idx, int):
                raise ValueError("suspect_cells must be integers")
            if 0 <= idx < len(script.cells) and idx not in suspects:
                suspects.append(idx)
        return DebugReport(
            error_class=error_class,
            suspect_cells=tuple(suspects),
            fix_directive=directive,
        )

    try:
        report, _ = ask_structured(
            backend,
            ChatRequest(
                role_id="debugger",
                system_prompt=ROLE_CHARTERS["debugger"],
                messages=(
                    ("user",
                     f"Exit code {outcome.exit_code}. Stderr tail:\n{stderr_text}\n\n"
                     f"Script:\n{render_cells(script)}\n\nReply with JSON "
                     "{\"error_class\": str, \"suspect_cells\": [int], "
                     "\"fix_directive\": str}."),
                ),
                response_schema="debug_report",
            ),
            parse,
        )
        return report
    except MissingFixtureError:
        raise
    except (BackendError, StructuredParseError):
        excerpt = stderr_text.strip()[-500:] or "(stderr empty)"
        return DebugReport(
            error_class="unclassified",
            suspect_cells=tuple(mapped),
            fix_directive=f"Inspect this stderr excerpt and repair the failure: {excerpt}",
        )


def relative_to_project(path: Path, project_dir: Path) -> str:
    """Store paths relative to the project dir so logs are machine-portable."""
    return str(Path(path).resolve().relative_to(Path(project_dir).resolve()))


def sorted_artifact_names(manifest: ArtifactManifest) -> list[str]:
    return sorted(entry.name for entry in manifest.entries)


def write_code_state(iteration_dir: Path, runtime: RuntimeConfig, source: str) -> Path:
    path = Path(iteration_dir) / runtime.main_filename
    path.write_text(source, encoding="utf-8")
    return path


def metrics_are_finite(metrics: dict[str, Any]) -> bool:
    return all(
        isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(float(v))
        for v in metrics.values()
    )
