"""Problem intake: formalize raw requests and route them to generative groups.

The coordinator turns free-text research requests into a structured problem
statement with a heuristic well-posedness check (forward PDEs need boundary
conditions; time-dependent ones need initial conditions). The gatekeeper
maps the formalized problem onto an ordered list of group steps, where any
step that consumes another step's outputs must come after it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Any

from .backend import Backend, ChatRequest
from .scaffolding import GROUPS, ROLE_CHARTERS
from .structured import ask_structured, parse_json_object


class IntakeError(Exception):
    pass


class UnroutableError(IntakeError):
    """Carries an escalation record for human review."""

    def __init__(self, detail: str, escalation: dict[str, Any]):
        self.escalation = escalation
        super().__init__(detail)


@dataclass(frozen=True)
class ReferenceData:
    path: str
    format_notes: str = ""

    def __post_init__(self) -> None:
        if not self.path or "\x00" in self.path or self.path != self.path.strip():
            raise ValueError(f"reference data path {self.path!r} is not a valid path")

    def to_dict(self) -> dict[str, Any]:
        return {"path": self.path, "format_notes": self.format_notes}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ReferenceData":
        return cls(path=data["path"], format_notes=data.get("format_notes", ""))


@dataclass(frozen=True)
class FormalProblem:
    """A well-posed (or explicitly flagged) problem statement."""

    title: str
    pde_or_task: str
    domain_spec: str = ""
    boundary_conditions: str = ""
    initial_conditions: str = ""
    reference_data: ReferenceData | None = None
    problem_class: str = "forward"
    outputs_required: tuple[str, ...] = ()
    ill_posed: bool = False
    clarification: str = ""

    def __post_init__(self) -> None:
        if self.problem_class not in ("forward", "inverse"):
            raise ValueError("problem_class must be forward or inverse")
        if not self.title:
            raise ValueError("title must be non-empty")
        object.__setattr__(self, "outputs_required", tuple(self.outputs_required))

    def to_dict(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "pde_or_task": self.pde_or_task,
            "domain_spec": self.domain_spec,
            "boundary_conditions": self.boundary_conditions,
            "initial_conditions": self.initial_conditions,
            "reference_data": self.reference_data.to_dict() if self.reference_data else None,
            "problem_class": self.problem_class,
            "outputs_required": list(self.outputs_required),
            "ill_posed": self.ill_posed,
            "clarification": self.clarification,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FormalProblem":
        reference = data.get("reference_data")
        return cls(
            title=data["title"],
            pde_or_task=data.get("pde_or_task", ""),
            domain_spec=data.get("domain_spec", ""),
            boundary_conditions=data.get("boundary_conditions", ""),
            initial_conditions=data.get("initial_conditions", ""),
            reference_data=ReferenceData.from_dict(reference) if reference else None,
            problem_class=data.get("problem_class", "forward"),
            outputs_required=tuple(data.get("outputs_required", ())),
            ill_posed=data.get("ill_posed", False),
            clarification=data.get("clarification", ""),
        )


_TIME_HINTS = re.compile(
    r"u_t|_t\b|∂t|d/dt|time[- ]dependent|\bt ∈|\bt in \[|temporal|evolution|unsteady",
    re.IGNORECASE,
)


def _looks_time_dependent(problem: FormalProblem) -> bool:
    text = " ".join((problem.pde_or_task, problem.domain_spec))
    return bool(_TIME_HINTS.search(text))


def check_well_posedness(problem: FormalProblem) -> FormalProblem:
    """Heuristic checklist; flags rather than rejects."""
    if problem.problem_class != "forward":
        return problem
    if not problem.boundary_conditions.strip():
        return replace(
            problem,
            ill_posed=True,
            clarification=(
                "No boundary conditions were stated for a forward problem. "
                "What conditions hold on the domain boundary?"
            ),
        )
    if _looks_time_dependent(problem) and not problem.initial_conditions.strip():
        return replace(
            problem,
            ill_posed=True,
            clarification=(
                "The problem looks time-dependent but no initial condition was "
                "stated. What is the state at the initial time?"
            ),
        )
    return problem


def formalize_request(raw: str, backend: Backend) -> FormalProblem:
    """Coordinator call: raw request text to a structured, checked problem."""
    if not raw.strip():
        raise IntakeError("request text must be non-empty")

    def parse(reply: str) -> FormalProblem:
        data = parse_json_object(reply)
        reference = data.get("reference_data")
        ref = None
        if isinstance(reference, dict) and reference.get("path"):
            ref = ReferenceData(
                path=str(reference["path"]),
                format_notes=str(reference.get("format_notes", "")),
            )
        problem_class = data.get("problem_class", "forward")
        if problem_class not in ("forward", "inverse"):
            raise ValueError("problem_class must be forward or inverse")
        outputs = data.get("outputs_required", [])
        if not isinstance(outputs, list):
            raise ValueError("outputs_required must be a list")
        title = data.get("title")
        if not isinstance(title, str) or not title.strip():
            raise ValueError("title must be a non-empty string")
        return FormalProblem(
            title=title.strip(),
            pde_or_task=str(data.get("pde_or_task", "")),
            domain_spec=str(data.get("domain_spec", "")),
            boundary_conditions=str(data.get("boundary_conditions", "")),
            initial_conditions=str(data.get("initial_conditions", "")),
            reference_data=ref,
            problem_class=problem_class,
            outputs_required=tuple(str(o) for o in outputs),
        )

    problem, _ = ask_structured(
        backend,
        ChatRequest(
            role_id="coordinator",
            system_prompt=ROLE_CHARTERS["coordinator"],
            messages=(
                ("user",
                 "Formalize this research request as JSON with keys title, "
                 "pde_or_task, domain_spec, boundary_conditions, "
                 "initial_conditions, reference_data ({path, format_notes} or "
                 "null), problem_class (forward|inverse), outputs_required "
                 "(list of filename patterns).\n\nREQUEST:\n" + raw),
            ),
            response_schema="formal_problem",
        ),
        parse,
    )
    return check_well_posedness(problem)


@dataclass(frozen=True)
class RoutingStep:
    group: str
    problem: FormalProblem
    consumes_step: int | None = None

    def __post_init__(self) -> None:
        if self.group not in GROUPS:
            raise ValueError(f"unknown group {self.group!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "group": self.group,
            "problem": self.problem.to_dict(),
            "consumes_step": self.consumes_step,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RoutingStep":
        return cls(
            group=data["group"],
            problem=FormalProblem.from_dict(data["problem"]),
            consumes_step=data.get("consumes_step"),
        )


@dataclass(frozen=True)
class RoutingDecision:
    steps: tuple[RoutingStep, ...]
    rationale: str = ""

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("routing requires at least one step")
        for idx, step in enumerate(self.steps):
            if step.consumes_step is not None and not (0 <= step.consumes_step < idx):
                raise ValueError(
                    f"step {idx} consumes step {step.consumes_step}, which does not precede it"
                )
        object.__setattr__(self, "steps", tuple(self.steps))

    def groups(self) -> list[str]:
        return [step.group for step in self.steps]

    def to_dict(self) -> dict[str, Any]:
        return {
            "steps": [step.to_dict() for step in self.steps],
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RoutingDecision":
        return cls(
            steps=tuple(RoutingStep.from_dict(s) for s in data["steps"]),
            rationale=data.get("rationale", ""),
        )


_OVERRIDE_FIELDS = (
    "title",
    "pde_or_task",
    "problem_class",
    "boundary_conditions",
    "initial_conditions",
    "domain_spec",
)


def route(problem: FormalProblem, backend: Backend) -> RoutingDecision:
    """Gatekeeper call: ordered group steps with data deps sequenced first."""

    def parse(reply: str) -> RoutingDecision:
        data = parse_json_object(reply)
        raw_steps = data.get("steps")
        if not isinstance(raw_steps, list) or not raw_steps:
            raise ValueError("steps must be a non-empty list")
        steps: list[RoutingStep] = []
        for idx, raw in enumerate(raw_steps):
            if not isinstance(raw, dict):
                raise ValueError("each step must be an object")
            group = raw.get("group")
            if group not in GROUPS:
                raise ValueError(
                    f"step {idx} group must be one of {GROUPS}, got {group!r}"
                )
            overrides = {
                key: str(raw[key]) for key in _OVERRIDE_FIELDS if key in raw
            }
            step_problem = replace(problem, **overrides) if overrides else problem
            if "outputs_required" in raw:
                step_problem = replace(
                    step_problem,
                    outputs_required=tuple(str(o) for o in raw["outputs_required"]),
                )
            consumes = raw.get("consumes_step")
            if consumes is not None and (
                isinstance(consumes, bool) or not isinstance(consumes, int)
            ):
                raise ValueError("consumes_step must be an integer index")
            steps.append(
                RoutingStep(group=group, problem=step_problem, consumes_step=consumes)
            )
        return RoutingDecision(steps=tuple(steps), rationale=str(data.get("rationale", "")))

    from .structured import StructuredParseError

    try:
        decision, _ = ask_structured(
            backend,
            ChatRequest(
                role_id="gatekeeper",
                system_prompt=ROLE_CHARTERS["gatekeeper"],
                messages=(
                    ("user",
                     "Route this problem. Reply with JSON {\"steps\": [{\"group\": "
                     "\"scic\"|\"sciml_piml\"|\"sciml_operator\"|\"storage\", "
                     "optional per-step overrides of title/pde_or_task/"
                     "problem_class/outputs_required, optional \"consumes_step\": "
                     "int}], \"rationale\": str}. Order data-producing steps "
                     "before the steps that consume them.\n\nPROBLEM:\n"
                     + str(problem.to_dict())),
                ),
                response_schema="routing",
            ),
            parse,
        )
    except StructuredParseError as exc:
        raise UnroutableError(
            f"gatekeeper could not route the problem: {exc}",
            escalation={
                "problem": problem.to_dict(),
                "reason": str(exc),
                "needs": "human routing decision",
            },
        ) from exc
    return decision
