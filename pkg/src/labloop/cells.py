"""Cell model and deterministic patch engine.

Scripts are split into delimiter-headed cells (default: lines starting with
`# %%`; the trailing text names the cell). Patches are cell-local, line-level
splices in a published JSON schema:

    {"cell_index": int,
     "ops": [{"op": "replace"|"insert"|"delete",
              "start_line": int,          # 0-based within the cell body
              "end_line": int?,           # inclusive; replace/delete only
              "lines": [string]?}]}       # replace/insert only

Ops are applied in descending start_line order so earlier splices cannot
shift the indices of later ones; ties keep emission order. parse and render
are exact inverses on arbitrary text, and application is pure: the input
script is never mutated.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Any, Iterable

DEFAULT_DELIMITER = r"^# %%(.*)$"


class CellError(Exception):
    pass


class PatchSchemaError(CellError):
    pass


class PatchApplicationError(CellError):
    pass


@dataclass(frozen=True)
class Cell:
    """One delimiter-headed block: exact header line plus body lines."""

    name: str
    header: str
    lines: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lines", tuple(self.lines))


@dataclass(frozen=True)
class CellScript:
    preamble: tuple[str, ...]
    cells: tuple[Cell, ...]
    delimiter_pattern: str = DEFAULT_DELIMITER

    def __post_init__(self) -> None:
        object.__setattr__(self, "preamble", tuple(self.preamble))
        object.__setattr__(self, "cells", tuple(self.cells))

    def cell_names(self) -> list[str]:
        return [cell.name for cell in self.cells]

    def find_cell(self, name: str) -> int:
        for idx, cell in enumerate(self.cells):
            if cell.name == name:
                return idx
        raise KeyError(name)


def parse_cells(source: str, delimiter_pattern: str = DEFAULT_DELIMITER) -> CellScript:
    """Split source into preamble + cells. Inverse of render_cells, exactly."""
    try:
        pattern = re.compile(delimiter_pattern)
    except re.error as exc:
        raise CellError(f"invalid delimiter pattern: {exc}") from exc
    preamble: list[str] = []
    cells: list[Cell] = []
    current: tuple[str, str, list[str]] | None = None
    seen_names: dict[str, int] = {}
    for line in source.split("\n"):
        match = pattern.match(line)
        if match:
            if current is not None:
                cells.append(Cell(name=current[0], header=current[1], lines=tuple(current[2])))
            raw_name = (match.group(1) if match.groups() else "").strip()
            base = raw_name if raw_name else "cell"
            count = seen_names.get(base, 0) + 1
            seen_names[base] = count
            name = base if count == 1 else f"{base}_{count}"
            current = (name, line, [])
        elif current is None:
            preamble.append(line)
        else:
            current[2].append(line)
    if current is not None:
        cells.append(Cell(name=current[0], header=current[1], lines=tuple(current[2])))
    return CellScript(
        preamble=tuple(preamble), cells=tuple(cells), delimiter_pattern=delimiter_pattern
    )


def render_cells(script: CellScript) -> str:
    parts: list[str] = list(script.preamble)
    for cell in script.cells:
        parts.append(cell.header)
        parts.extend(cell.lines)
    return "\n".join(parts)


def source_hash(source: str) -> str:
    return hashlib.sha256(source.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PatchOp:
    op: str
    start_line: int
    end_line: int | None = None
    lines: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.lines is not None:
            object.__setattr__(self, "lines", tuple(self.lines))

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"op": self.op, "start_line": self.start_line}
        if self.end_line is not None:
            data["end_line"] = self.end_line
        if self.lines is not None:
            data["lines"] = list(self.lines)
        return data


@dataclass(frozen=True)
class CellPatch:
    cell_index: int
    ops: tuple[PatchOp, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ops", tuple(self.ops))

    def to_dict(self) -> dict[str, Any]:
        return {"cell_index": self.cell_index, "ops": [op.to_dict() for op in self.ops]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))


_ALLOWED_OPS = ("replace", "insert", "delete")
_OP_KEYS = {"op", "start_line", "end_line", "lines"}


def _require_int(value: Any, label: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise PatchSchemaError(f"{label} must be an integer, got {value!r}")
    return value


def parse_patch(payload: str | dict[str, Any]) -> CellPatch:
    """Strict parse of the published patch schema; rejects unknown keys."""
    if isinstance(payload, str):
        try:
            data = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise PatchSchemaError(f"patch is not valid JSON: {exc}") from exc
    else:
        data = payload
    if not isinstance(data, dict):
        raise PatchSchemaError("patch must be a JSON object")
    extra = set(data) - {"cell_index", "ops"}
    if extra:
        raise PatchSchemaError(f"unknown patch keys: {sorted(extra)}")
    if "cell_index" not in data or "ops" not in data:
        raise PatchSchemaError("patch requires cell_index and ops")
    cell_index = _require_int(data["cell_index"], "cell_index")
    raw_ops = data["ops"]
    if not isinstance(raw_ops, list):
        raise PatchSchemaError("ops must be a list")
    ops: list[PatchOp] = []
    for pos, raw in enumerate(raw_ops):
        if not isinstance(raw, dict):
            raise PatchSchemaError(f"ops[{pos}] must be an object")
        extra = set(raw) - _OP_KEYS
        if extra:
            raise PatchSchemaError(f"ops[{pos}] has unknown keys: {sorted(extra)}")
        kind = raw.get("op")
        if kind not in _ALLOWED_OPS:
            raise PatchSchemaError(f"ops[{pos}].op must be one of {_ALLOWED_OPS}, got {kind!r}")
        start = _require_int(raw.get("start_line"), f"ops[{pos}].start_line")
        end = raw.get("end_line")
        if end is not None:
            end = _require_int(end, f"ops[{pos}].end_line")
        lines = raw.get("lines")
        if lines is not None:
            if not isinstance(lines, list) or any(not isinstance(l, str) for l in lines):
                raise PatchSchemaError(f"ops[{pos}].lines must be a list of strings")
            lines = tuple(lines)
        if kind in ("replace", "delete") and end is None:
            raise PatchSchemaError(f"ops[{pos}]: {kind} requires end_line")
        if kind in ("replace", "insert") and lines is None:
            raise PatchSchemaError(f"ops[{pos}]: {kind} requires lines")
        if kind == "delete" and lines is not None:
            raise PatchSchemaError(f"ops[{pos}]: delete takes no lines")
        if kind == "insert" and end is not None:
            raise PatchSchemaError(f"ops[{pos}]: insert takes no end_line")
        ops.append(PatchOp(op=kind, start_line=start, end_line=end, lines=lines))
    return CellPatch(cell_index=cell_index, ops=tuple(ops))


def _validate_op_bounds(op: PatchOp, cell_len: int, pos: int) -> None:
    if op.op == "insert":
        if not (0 <= op.start_line <= cell_len):
            raise PatchApplicationError(
                f"ops[{pos}]: insert at {op.start_line} outside [0, {cell_len}]"
            )
        return
    end = op.end_line if op.end_line is not None else op.start_line
    if not (0 <= op.start_line <= end < cell_len):
        raise PatchApplicationError(
            f"ops[{pos}]: {op.op} range [{op.start_line}, {end}] outside cell of {cell_len} lines"
        )


def apply_patch(script: CellScript, patch: CellPatch) -> CellScript:
    """Pure splice: returns a new script; raises before touching anything."""
    if not (0 <= patch.cell_index < len(script.cells)):
        raise PatchApplicationError(
            f"cell_index {patch.cell_index} outside script of {len(script.cells)} cells"
        )
    target = script.cells[patch.cell_index]
    for pos, op in enumerate(patch.ops):
        _validate_op_bounds(op, len(target.lines), pos)
    body = list(target.lines)
    ordered = sorted(
        enumerate(patch.ops), key=lambda item: (-item[1].start_line, item[0])
    )
    for _, op in ordered:
        if op.op == "insert":
            body[op.start_line : op.start_line] = list(op.lines or ())
        elif op.op == "replace":
            body[op.start_line : (op.end_line or 0) + 1] = list(op.lines or ())
        else:
            del body[op.start_line : (op.end_line or 0) + 1]
    cells = list(script.cells)
    cells[patch.cell_index] = Cell(name=target.name, header=target.header, lines=tuple(body))
    return CellScript(
        preamble=script.preamble, cells=tuple(cells), delimiter_pattern=script.delimiter_pattern
    )


def cell_line_spans(script: CellScript) -> list[tuple[int, int]]:
    """1-based inclusive global line span (header + body) per cell."""
    spans: list[tuple[int, int]] = []
    cursor = len(script.preamble)
    for cell in script.cells:
        start = cursor + 1
        cursor += 1 + len(cell.lines)
        spans.append((start, cursor))
    return spans


def global_line_to_cell(script: CellScript, lineno: int) -> int | None:
    """Map a 1-based rendered line number to its cell index (None = preamble)."""
    for idx, (start, end) in enumerate(cell_line_spans(script)):
        if start <= lineno <= end:
            return idx
    return None


def numbered_cell_body(cell: Cell) -> str:
    """Cell body with 0-based line numbers, as quoted to the patcher."""
    return "\n".join(f"{idx}: {line}" for idx, line in enumerate(cell.lines))


def describe_cells(script: CellScript) -> str:
    rows = []
    for idx, cell in enumerate(script.cells):
        rows.append(f"{idx}: {cell.name} ({len(cell.lines)} lines)")
    return "\n".join(rows)


def iter_sources(sources: Iterable[str]) -> Iterable[CellScript]:
    for source in sources:
        yield parse_cells(source)
