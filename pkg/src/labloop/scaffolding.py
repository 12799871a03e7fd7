"""Prompt scaffolding: blueprint assets, role charters, history compression.

Five method blueprints ship as editable plain-text assets. System prompts
are deterministic concatenations of a role charter, the blueprints relevant
to the generative group, the action-space axes, and any extra rules, so that
identical inputs always produce identical prompt text. History summaries are
budget-bounded: recent records stay verbatim, older ones are compressed (via
the backend when available, by truncation when not).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .backend import (
    Backend,
    BackendError,
    ChatRequest,
    MissingFixtureError,
    estimate_tokens,
)
from .bandit import ActionSpace, TrialHistory

BLUEPRINT_IDS = (
    "universal_approximation",
    "piml",
    "operator_learning",
    "optimization",
    "numerical_methods",
)

GROUPS = ("scic", "sciml_piml", "sciml_operator", "storage")

GROUP_BLUEPRINTS: dict[str, tuple[str, ...]] = {
    "scic": ("numerical_methods",),
    "sciml_piml": ("universal_approximation", "piml", "optimization"),
    "sciml_operator": ("universal_approximation", "operator_learning", "optimization"),
    "storage": (),
}

DEFAULT_BLUEPRINT_DIR = Path(__file__).parent / "blueprints"


class ScaffoldingError(Exception):
    pass


class MissingBlueprintError(ScaffoldingError):
    def __init__(self, missing: list[str]):
        self.missing = list(missing)
        super().__init__(f"missing blueprint files: {', '.join(missing)}")


class EmptyBlueprintError(ScaffoldingError):
    pass


class UnknownRoleError(ScaffoldingError):
    pass


class UnknownGroupError(ScaffoldingError):
    pass


class PromptBudgetError(ScaffoldingError):
    pass


@dataclass(frozen=True)
class Blueprint:
    id: str
    body: str
    applicable_groups: tuple[str, ...]


@dataclass(frozen=True)
class BlueprintRegistry:
    blueprints: dict[str, Blueprint]

    def for_group(self, group: str) -> list[Blueprint]:
        if group not in GROUP_BLUEPRINTS:
            raise UnknownGroupError(f"unknown group {group!r}")
        return [self.blueprints[bp_id] for bp_id in GROUP_BLUEPRINTS[group]]


def load_blueprints(directory: str | Path = DEFAULT_BLUEPRINT_DIR) -> BlueprintRegistry:
    """Load all five blueprint assets; missing files are reported together."""
    directory = Path(directory)
    missing = [bp_id for bp_id in BLUEPRINT_IDS if not (directory / f"{bp_id}.md").exists()]
    if missing:
        raise MissingBlueprintError(missing)
    blueprints: dict[str, Blueprint] = {}
    for bp_id in BLUEPRINT_IDS:
        body = (directory / f"{bp_id}.md").read_text(encoding="utf-8")
        if not body.strip():
            raise EmptyBlueprintError(f"blueprint {bp_id!r} has an empty body")
        groups = tuple(g for g in GROUPS if bp_id in GROUP_BLUEPRINTS[g])
        blueprints[bp_id] = Blueprint(id=bp_id, body=body, applicable_groups=groups)
    return BlueprintRegistry(blueprints=blueprints)


ROLE_CHARTERS: dict[str, str] = {
    "coordinator": (
        "You formalize raw research requests into well-posed problem statements: "
        "governing equations or task, domain, boundary and initial conditions, "
        "forward/inverse classification, reference data, and required outputs. "
        "Flag under-specified requests instead of guessing."
    ),
    "gatekeeper": (
        "You route a formalized problem to the generative groups (classical "
        "numerics, physics-informed learning, operator learning) or storage, "
        "splitting hybrid requests into ordered steps so data-producing steps "
        "run before the steps that consume their outputs. When classical and "
        "learned routes are both plausible, prefer the cheaper classical route "
        "and say why."
    ),
    "strategist": (
        "You are the scientific brain of the loop. Given the problem, the trial "
        "history, and the latest diagnosis, commit to exactly one action from "
        "the action space plus a concrete plan: which modules to use, how to "
        "train or solve, and what numbers would count as success. Answer the "
        "diagnosis you were given; do not repeat an arm that already plateaued "
        "when an unexplored arm is plausibly better."
    ),
    "critic": (
        "You audit a strategy report against the blueprints and the problem "
        "statement before any code is touched. Reject plans that contradict a "
        "blueprint rule, ignore the standing diagnosis, or leave success "
        "criteria unstated; list concrete requirements for each rejection."
    ),
    "advisor": (
        "You read a finished run (logs, metrics, plots) like a lab PI: diagnose "
        "failure modes, grade reporting detail and method optimality against "
        "the rubric, judge whether metrics and artifacts tell a consistent "
        "story, and prescribe the single most promising cure or call the "
        "session done."
    ),
    "advisor_parser": (
        "You convert an advisor's prose report into the structured diagnosis "
        "JSON schema exactly, inventing nothing. If the prose lacks a required "
        "field, say so rather than fabricating it."
    ),
    "analyzer": (
        "You extract structured metadata from code: what equation or task it "
        "solves, the method, notable modules, and a one-paragraph description "
        "a retrieval system can match against."
    ),
    "splitter": (
        "You choose chunk boundaries for long scripts at logical seams "
        "(function ends, cell ends, config blocks) and return them as line "
        "ranges that exactly partition the file."
    ),
    "retriever": (
        "You turn a problem statement and committed action into a retrieval "
        "query over the template store: equation family, method keywords, and "
        "must-have modules."
    ),
    "validator": (
        "You check whether a retrieved template actually fits the problem: "
        "same equation family, method consistent with the blueprint rules, "
        "boundary handling compatible. Verdict is accepted or mismatch with "
        "the rule you applied."
    ),
    "collector": (
        "You resolve which support modules an experimental script needs, in "
        "dependency order, and report any that the store cannot supply."
    ),
    "librarian": (
        "You write small, self-contained support modules that the store lacks, "
        "matching the interface the plan names. Code must be syntactically "
        "valid and import nothing exotic."
    ),
    "planner": (
        "You map a strategy directive or debug report onto the cell structure "
        "of the current script: which cells change and what each change "
        "accomplishes. Never target cells that do not exist."
    ),
    "planner_parser": (
        "You convert a planner's prose into the target-list JSON schema "
        "exactly: cell indices plus one intent sentence each."
    ),
    "patcher": (
        "You emit one cell patch at a time in the published JSON patch schema: "
        "line-level replace/insert/delete operations against the quoted cell "
        "body. Patch only what the intent requires."
    ),
    "inspector": (
        "You audit the patched script against the committed strategy before "
        "execution: every promised change present, nothing extraneous broken. "
        "Report faithful or list violations with evidence."
    ),
    "filing": (
        "You assign short filesystem-safe project names derived from the "
        "problem, for the experiment workspace."
    ),
    "debugger": (
        "You read a crash (exit code, stderr, traceback) against the script's "
        "cell structure, classify the error, point at suspect cells, and give "
        "one concrete fix directive."
    ),
    "register": (
        "You keep the trial ledger: one immutable record per iteration with "
        "action, code reference, observation, reward, and diagnosis."
    ),
    "history_summarizer": (
        "You compress older trial records into a short factual digest: actions "
        "tried, rewards, and standing conclusions. No speculation."
    ),
}


@dataclass(frozen=True)
class PromptBundle:
    system_prompt: str
    context_budget: int
    included_blueprints: tuple[str, ...]


def compose_system_prompt(
    role: str,
    group: str,
    registry: BlueprintRegistry,
    extra_rules: str = "",
    action_space: ActionSpace | None = None,
    max_budget: int | None = None,
) -> PromptBundle:
    """Deterministic concatenation: charter + axes + blueprints + extra rules."""
    charter = ROLE_CHARTERS.get(role)
    if charter is None:
        raise UnknownRoleError(f"unknown role {role!r}")
    blueprints = registry.for_group(group)
    sections = [f"ROLE: {role}\n{charter}"]
    if action_space is not None:
        axes_lines = ["ACTION SPACE (choose exactly one option per axis):"]
        for axis, options in action_space.axes().items():
            axes_lines.append(f"{axis}: " + " | ".join(options))
        sections.append("\n".join(axes_lines))
    for blueprint in blueprints:
        sections.append(f"BLUEPRINT [{blueprint.id}]\n{blueprint.body.strip()}")
    if extra_rules:
        sections.append(f"ADDITIONAL RULES\n{extra_rules}")
    prompt = "\n\n".join(sections)
    estimate = estimate_tokens(prompt)
    if max_budget is not None and estimate > max_budget:
        raise PromptBudgetError(
            f"composed prompt estimates {estimate} tokens, budget is {max_budget}"
        )
    return PromptBundle(
        system_prompt=prompt,
        context_budget=estimate,
        included_blueprints=tuple(bp.id for bp in blueprints),
    )


def _history_rows(history: TrialHistory) -> list[str]:
    rows = []
    for record in history.records:
        cure = str(record.diagnosis.get("prescribed_cure", "")).replace("\n", " ")[:100]
        action = record.action
        rows.append(
            f"| {record.iteration} | {action.rep}/{action.constraint}/{action.opt} "
            f"| {record.reward.total():.1f} | {cure} |"
        )
    return rows


def summarize_history(
    history: TrialHistory,
    budget: int,
    backend: Backend,
    recent_verbatim: int = 5,
) -> str:
    """Budget-bounded history digest; never raises on backend failure."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    if len(history) == 0:
        return ""
    header = "| iter | action | reward | prescribed cure |"
    rows = _history_rows(history)
    full = "\n".join([header] + rows)
    if estimate_tokens(full) <= budget:
        return full
    recent = rows[-recent_verbatim:]
    older = rows[: len(rows) - len(recent)]
    summary = ""
    if older:
        try:
            response = backend.complete(
                ChatRequest(
                    role_id="history_summarizer",
                    system_prompt=ROLE_CHARTERS["history_summarizer"],
                    messages=(
                        (
                            "user",
                            "Summarize these earlier trials in a few sentences:\n"
                            + "\n".join(older),
                        ),
                    ),
                    budget=budget,
                )
            )
            summary = response.text.strip()
        except MissingFixtureError:
            raise
        except BackendError:
            summary = f"(summary unavailable; {len(older)} earlier trials omitted)"
    parts = []
    if summary:
        parts.append("EARLIER TRIALS (condensed): " + summary)
    parts.append("\n".join([header] + recent))
    text = "\n".join(parts)
    max_chars = budget * 4
    if len(text) > max_chars:
        text = text[-max_chars:]
    return text
