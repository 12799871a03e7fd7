"""Implementation pipeline: plan targets, emit patches, audit faithfulness.

Turns an accepted strategy (or a debug report) into a new code state through
the cell engine: the planner maps the directive onto cells, the patcher
emits schema-valid patches one cell at a time, and the inspector audits the
result against the strategy. Unfaithful verdicts loop back to planning with
the violations as the new directive, bounded by a repair cap; exhausting the
cap force-forwards the script with a flag rather than stalling the loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

from .backend import Backend, ChatRequest
from .cells import (
    CellPatch,
    CellScript,
    PatchApplicationError,
    apply_patch,
    describe_cells,
    numbered_cell_body,
    parse_cells,
    parse_patch,
    render_cells,
    source_hash,
)
from .structured import StructuredParseError, ask_structured, parse_json_object

logger = logging.getLogger(__name__)


class ImplementError(Exception):
    def __init__(self, stage: str, detail: str):
        self.stage = stage
        super().__init__(f"[{stage}] {detail}")


@dataclass(frozen=True)
class CellPlan:
    """Which cells change and why; indices validated, duplicates merged."""

    targets: tuple[tuple[int, str], ...]
    repairs: tuple[str, ...] = ()


@dataclass(frozen=True)
class InspectionVerdict:
    faithful: bool
    violations: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "violations", tuple(tuple(v) for v in self.violations)
        )
        if self.faithful and self.violations:
            raise ValueError("a faithful verdict cannot carry violations")


def directive_text(directive: Any) -> str:
    """Normalize a strategy report, debug report, or plain text to prose."""
    if isinstance(directive, str):
        return directive
    if hasattr(directive, "fix_directive"):
        cells = ", ".join(str(c) for c in getattr(directive, "suspect_cells", ()))
        return (
            f"Fix a {directive.error_class} failure. Suspect cells: [{cells}]. "
            f"{directive.fix_directive}"
        )
    if hasattr(directive, "narrative"):
        action = getattr(directive, "action", None)
        arm = f" committed action: {action.rep}/{action.constraint}/{action.opt}." if action else ""
        return f"{directive.narrative}{arm}"
    return str(directive)


def _planner_prompt() -> str:
    from .scaffolding import ROLE_CHARTERS

    return ROLE_CHARTERS["planner"]


def plan_targets(directive: Any, script: CellScript, backend: Backend) -> CellPlan:
    """Two-stage planning: free-text study, then strict target-list parse."""
    text = directive_text(directive)
    layout = describe_cells(script)
    study = backend.complete(
        ChatRequest(
            role_id="planner",
            system_prompt=_planner_prompt(),
            messages=(
                ("user", f"Script cells:\n{layout}\n\nDirective:\n{text}\n"
                         "Explain which cells must change and why."),
            ),
        )
    )

    def parse(reply: str) -> list[tuple[int, str]]:
        data = parse_json_object(reply)
        raw_targets = data.get("targets")
        if not isinstance(raw_targets, list):
            raise ValueError("targets must be a list")
        parsed: list[tuple[int, str]] = []
        for item in raw_targets:
            if not isinstance(item, dict):
                raise ValueError("each target must be an object")
            idx = item.get("cell_index")
            intent = item.get("intent")
            if isinstance(idx, bool) or not isinstance(idx, int):
                raise ValueError("cell_index must be an integer")
            if not isinstance(intent, str) or not intent:
                raise ValueError("intent must be a non-empty string")
            parsed.append((idx, intent))
        return parsed

    from .scaffolding import ROLE_CHARTERS

    try:
        targets, _ = ask_structured(
            backend,
            ChatRequest(
                role_id="planner_parser",
                system_prompt=ROLE_CHARTERS["planner_parser"],
                messages=(
                    ("user",
                     "Convert this plan to JSON {\"targets\": [{\"cell_index\": int, "
                     f"\"intent\": str}}]}}. Plan:\n{study.text}"),
                ),
                response_schema="cell_plan",
            ),
            parse,
        )
    except StructuredParseError as exc:
        raise ImplementError("plan", str(exc)) from exc

    repairs: list[str] = []
    merged: dict[int, str] = {}
    order: list[int] = []
    for idx, intent in targets:
        if not (0 <= idx < len(script.cells)):
            repair = f"dropped out-of-range target cell {idx} (script has {len(script.cells)})"
            repairs.append(repair)
            logger.warning("plan repair: %s", repair)
            continue
        if idx in merged:
            merged[idx] = merged[idx] + "; " + intent
            repairs.append(f"merged duplicate target cell {idx}")
        else:
            merged[idx] = intent
            order.append(idx)
    return CellPlan(
        targets=tuple((idx, merged[idx]) for idx in order), repairs=tuple(repairs)
    )


def emit_patch(
    script: CellScript, cell_index: int, intent: str, backend: Backend
) -> CellPatch:
    """Ask the patcher for one schema-valid, bounds-valid patch; one re-ask."""
    from .scaffolding import ROLE_CHARTERS

    if not (0 <= cell_index < len(script.cells)):
        raise ImplementError("patch", f"target cell {cell_index} does not exist")
    if not intent.strip():
        return CellPatch(cell_index=cell_index, ops=())
    cell = script.cells[cell_index]

    def parse(reply: str) -> CellPatch:
        patch = parse_patch(parse_json_object(reply))
        if patch.cell_index != cell_index:
            raise ValueError(
                f"patch targets cell {patch.cell_index}, expected {cell_index}"
            )
        probe = apply_patch(script, patch)
        del probe
        return patch

    def wrapped(reply: str) -> CellPatch:
        try:
            return parse(reply)
        except PatchApplicationError as exc:
            raise ValueError(str(exc)) from exc

    try:
        patch, _ = ask_structured(
            backend,
            ChatRequest(
                role_id="patcher",
                system_prompt=ROLE_CHARTERS["patcher"],
                messages=(
                    ("user",
                     f"Cell {cell_index} ({cell.name}), body with 0-based line numbers:\n"
                     f"{numbered_cell_body(cell)}\n\nIntent: {intent}\n"
                     "Reply with one JSON patch for this cell."),
                ),
                response_schema="cell_patch",
            ),
            wrapped,
        )
    except StructuredParseError as exc:
        raise ImplementError("patch", str(exc)) from exc
    return patch


def inspect(script: CellScript, strategy: Any, backend: Backend) -> InspectionVerdict:
    """Audit the patched script; an unparseable reply counts as unfaithful."""
    from .scaffolding import ROLE_CHARTERS

    def parse(reply: str) -> InspectionVerdict:
        data = parse_json_object(reply)
        faithful = data.get("faithful")
        if not isinstance(faithful, bool):
            raise ValueError("faithful must be a boolean")
        violations = []
        for item in data.get("violations", []):
            if not isinstance(item, dict):
                raise ValueError("violations must be objects")
            violations.append(
                (str(item.get("requirement", "")), str(item.get("evidence", "")))
            )
        if faithful and violations:
            raise ValueError("faithful verdict cannot carry violations")
        return InspectionVerdict(faithful=faithful, violations=tuple(violations))

    try:
        verdict, _ = ask_structured(
            backend,
            ChatRequest(
                role_id="inspector",
                system_prompt=ROLE_CHARTERS["inspector"],
                messages=(
                    ("user",
                     f"Strategy:\n{directive_text(strategy)}\n\nScript:\n"
                     f"{render_cells(script)}\n\nReply with JSON "
                     "{\"faithful\": bool, \"violations\": [{\"requirement\": str, "
                     "\"evidence\": str}]}."),
                ),
                response_schema="inspection",
            ),
            parse,
            retries=0,
        )
    except StructuredParseError as exc:
        return InspectionVerdict(
            faithful=False,
            violations=(("inspector reply must parse", str(exc)),),
        )
    return verdict


@dataclass
class ImplementResult:
    script: CellScript
    source: str
    sha256: str
    force_forwarded: bool = False
    inspect_rounds: int = 0
    patches: list[CellPatch] = field(default_factory=list)
    plan_repairs: list[str] = field(default_factory=list)


def implement(
    strategy: Any,
    base_source: str | None,
    modules: list[tuple[str, str]],
    prior_script: CellScript | None,
    backend: Backend,
    inspector_cap: int = 2,
    delimiter_pattern: str | None = None,
) -> ImplementResult:
    """parse -> plan -> patch -> inspect, with bounded repair rounds."""
    if prior_script is not None:
        script = prior_script
    elif base_source is not None:
        script = (
            parse_cells(base_source, delimiter_pattern)
            if delimiter_pattern
            else parse_cells(base_source)
        )
    else:
        raise ImplementError("parse", "need a base template or a prior script")

    module_note = ""
    if modules:
        blocks = [f"MODULE {name}:\n{source}" for name, source in modules]
        module_note = "\n\nAvailable support modules:\n" + "\n\n".join(blocks)

    directive: Any = directive_text(strategy) + module_note
    result = ImplementResult(script=script, source="", sha256="")
    faithful = False
    for _ in range(max(inspector_cap, 1)):
        plan = plan_targets(directive, script, backend)
        result.plan_repairs.extend(plan.repairs)
        for idx, intent in plan.targets:
            patch = emit_patch(script, idx, intent, backend)
            try:
                script = apply_patch(script, patch)
            except PatchApplicationError as exc:
                raise ImplementError("apply", str(exc)) from exc
            result.patches.append(patch)
        verdict = inspect(script, strategy, backend)
        result.inspect_rounds += 1
        if verdict.faithful:
            faithful = True
            break
        directive = "Repair these violations:\n" + "\n".join(
            f"- {req} (evidence: {ev})" for req, ev in verdict.violations
        )
    result.script = script
    result.source = render_cells(script)
    result.sha256 = source_hash(result.source)
    result.force_forwarded = not faithful
    return result
