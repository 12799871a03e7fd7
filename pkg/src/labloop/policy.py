"""Policy team: strategist-critic loop, post-run advising, structured parsing.

The strategist commits to one action from the session's action space and a
concrete plan; the critic audits it against the blueprints and can bounce it
back with requirements, bounded by a round cap (force-accept keeps the loop
live, flagged for post-hoc penalties). After execution, the advisor reads
the run like a lab PI and its prose is converted into a machine-readable
StructuredDiagnosis whose grades are re-validated regardless of what the
backend claimed.

StructuredDiagnosis wire schema (published, extensible via `extras`):

    {"failure_modes": [str], "prescribed_cure": str,
     "grades": {"details_grade": 0..15, "optimality_grade": 0..15,
                "consistency_grade": 0..1, "rationale": str},
     "continue_or_stop": "continue"|"revert_to"|"stop_success"|"stop_exhausted",
     "revert_iteration": int?, "extras": {}}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .backend import Backend, BackendError, ChatRequest, MissingFixtureError
from .bandit import Action, ActionSpace, Observation, UnknownIdentifierError, validate_action
from .rewards import AdvisorGrades
from .scaffolding import ROLE_CHARTERS, PromptBundle
from .structured import StructuredParseError, ask_structured, parse_json_object


class PolicyError(Exception):
    pass


@dataclass(frozen=True)
class StrategyReport:
    action: Action
    narrative: str
    required_modules: tuple[str, ...] = ()
    training_plan: str = ""
    acceptance_targets: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "required_modules", tuple(self.required_modules))

    def to_dict(self) -> dict[str, Any]:
        return {
            "action": self.action.to_dict(),
            "narrative": self.narrative,
            "required_modules": list(self.required_modules),
            "training_plan": self.training_plan,
            "acceptance_targets": {
                key: float(self.acceptance_targets[key])
                for key in sorted(self.acceptance_targets)
            },
        }


@dataclass(frozen=True)
class Critique:
    verdict: str
    requirements: tuple[str, ...] = ()
    cited_principle: str = ""

    def __post_init__(self) -> None:
        if self.verdict not in ("accepted", "rejected"):
            raise ValueError("verdict must be accepted or rejected")
        object.__setattr__(self, "requirements", tuple(self.requirements))
        if self.verdict == "rejected" and not self.requirements:
            raise ValueError("a rejection must carry requirements")

    def to_dict(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict,
            "requirements": list(self.requirements),
            "cited_principle": self.cited_principle,
        }


DECISIONS = ("continue", "revert_to", "stop_success", "stop_exhausted")


@dataclass(frozen=True)
class StructuredDiagnosis:
    failure_modes: tuple[str, ...]
    prescribed_cure: str
    grades: AdvisorGrades
    continue_or_stop: str
    revert_iteration: int | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.continue_or_stop not in DECISIONS:
            raise ValueError(f"continue_or_stop must be one of {DECISIONS}")
        if self.continue_or_stop == "revert_to":
            if self.revert_iteration is None or self.revert_iteration < 1:
                raise ValueError("revert_to requires a positive revert_iteration")
        elif self.revert_iteration is not None:
            raise ValueError("revert_iteration only accompanies revert_to")
        object.__setattr__(self, "failure_modes", tuple(self.failure_modes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "failure_modes": list(self.failure_modes),
            "prescribed_cure": self.prescribed_cure,
            "grades": self.grades.to_dict(),
            "continue_or_stop": self.continue_or_stop,
            "revert_iteration": self.revert_iteration,
            "extras": dict(self.extras),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StructuredDiagnosis":
        return cls(
            failure_modes=tuple(data.get("failure_modes", ())),
            prescribed_cure=data.get("prescribed_cure", ""),
            grades=AdvisorGrades.from_dict(data["grades"]),
            continue_or_stop=data["continue_or_stop"],
            revert_iteration=data.get("revert_iteration"),
            extras=data.get("extras", {}),
        )


@dataclass
class StrategyContext:
    """Everything the strategist sees; assembled by the orchestrator."""

    bundle: PromptBundle
    problem_text: str
    action_space: ActionSpace
    history_summary: str = ""
    prior_diagnosis: StructuredDiagnosis | None = None
    binding_directives: tuple[str, ...] = ()
    prior_requirements: tuple[str, ...] = ()

    def user_message(self) -> str:
        parts = [f"PROBLEM:\n{self.problem_text}"]
        if self.binding_directives:
            parts.append(
                "BINDING DIRECTIVES (from the human operator; these constrain "
                "your plan):\n" + "\n".join(f"- {d}" for d in self.binding_directives)
            )
        if self.history_summary:
            parts.append(f"TRIAL HISTORY:\n{self.history_summary}")
        if self.prior_diagnosis is not None:
            parts.append(
                "LATEST DIAGNOSIS:\nfailure modes: "
                + "; ".join(self.prior_diagnosis.failure_modes)
                + f"\nprescribed cure: {self.prior_diagnosis.prescribed_cure}"
            )
        if self.prior_requirements:
            parts.append(
                "CRITIC REQUIREMENTS (your previous plan was rejected):\n"
                + "\n".join(f"- {r}" for r in self.prior_requirements)
            )
        parts.append(
            "Reply with JSON {\"action\": {\"rep\": str, \"constraint\": str, "
            "\"opt\": str}, \"narrative\": str, \"required_modules\": [str], "
            "\"training_plan\": str, \"acceptance_targets\": {str: float}}."
        )
        return "\n\n".join(parts)


def propose_strategy(context: StrategyContext, backend: Backend) -> StrategyReport:
    """Strategist call; the action is validated against the session space."""

    def parse(reply: str) -> StrategyReport:
        data = parse_json_object(reply)
        raw_action = data.get("action")
        if not isinstance(raw_action, dict):
            raise ValueError("action must be an object")
        action = Action(
            rep=str(raw_action.get("rep", "")),
            constraint=str(raw_action.get("constraint", "")),
            opt=str(raw_action.get("opt", "")),
            free_text_plan=str(data.get("narrative", "")),
        )
        try:
            validate_action(action, context.action_space)
        except UnknownIdentifierError as exc:
            raise ValueError(str(exc)) from exc
        narrative = data.get("narrative")
        if not isinstance(narrative, str) or not narrative.strip():
            raise ValueError("narrative must be non-empty")
        targets = data.get("acceptance_targets", {})
        if not isinstance(targets, dict):
            raise ValueError("acceptance_targets must be a map")
        return StrategyReport(
            action=action,
            narrative=narrative,
            required_modules=tuple(str(m) for m in data.get("required_modules", ())),
            training_plan=str(data.get("training_plan", "")),
            acceptance_targets={str(k): float(v) for k, v in targets.items()},
        )

    report, _ = ask_structured(
        backend,
        ChatRequest(
            role_id="strategist",
            system_prompt=context.bundle.system_prompt,
            messages=(("user", context.user_message()),),
            response_schema="strategy_report",
        ),
        parse,
    )
    return report


def critique_strategy(
    report: StrategyReport, context: StrategyContext, backend: Backend
) -> Critique:
    def parse(reply: str) -> Critique:
        data = parse_json_object(reply)
        verdict = data.get("verdict")
        requirements = data.get("requirements", [])
        if not isinstance(requirements, list):
            raise ValueError("requirements must be a list")
        return Critique(
            verdict=str(verdict),
            requirements=tuple(str(r) for r in requirements),
            cited_principle=str(data.get("cited_principle", "")),
        )

    critique, _ = ask_structured(
        backend,
        ChatRequest(
            role_id="critic",
            system_prompt=context.bundle.system_prompt,
            messages=(
                ("user",
                 f"PROBLEM:\n{context.problem_text}\n\nPROPOSED STRATEGY:\n"
                 f"action: {report.action.rep}/{report.action.constraint}/"
                 f"{report.action.opt}\nnarrative: {report.narrative}\n"
                 f"training plan: {report.training_plan}\n\nReply with JSON "
                 "{\"verdict\": \"accepted\"|\"rejected\", \"requirements\": "
                 "[str], \"cited_principle\": str}."),
            ),
            response_schema="critique",
        ),
        parse,
    )
    return critique


@dataclass(frozen=True)
class StrategyLoopResult:
    report: StrategyReport
    critique: Critique
    force_accepted: bool
    rounds: int


def strategy_loop(
    context: StrategyContext,
    backend: Backend,
    max_rounds: int = 3,
    on_round: Any = None,
) -> StrategyLoopResult:
    """Proposer-critic rounds; never deadlocks (force-accept at the cap).

    on_round, when given, is called with (report, critique, round_idx) after
    every round so callers can surface rejected proposals too.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    report: StrategyReport | None = None
    critique: Critique | None = None
    for round_idx in range(1, max_rounds + 1):
        report = propose_strategy(context, backend)
        critique = critique_strategy(report, context, backend)
        if on_round is not None:
            on_round(report, critique, round_idx)
        if critique.verdict == "accepted":
            return StrategyLoopResult(
                report=report, critique=critique, force_accepted=False, rounds=round_idx
            )
        context.prior_requirements = context.prior_requirements + critique.requirements
    assert report is not None and critique is not None
    return StrategyLoopResult(
        report=report, critique=critique, force_accepted=True, rounds=max_rounds
    )


def _degraded_report(observation: Observation, epsilon: float, metric: str) -> str:
    lines = ["(degraded rule-based advisory: backend unavailable)"]
    if observation.exit_code != 0:
        lines.append(
            f"Run failed with exit code {observation.exit_code}; repair the crash "
            "before any methodological change."
        )
    elif metric in observation.metrics:
        err = observation.metrics[metric]
        if err <= epsilon:
            lines.append(
                f"{metric}={err:.3e} meets the {epsilon:.0e} target; consider stopping."
            )
        else:
            lines.append(
                f"{metric}={err:.3e} misses the {epsilon:.0e} target; continue "
                "refining the current approach."
            )
    else:
        lines.append(f"No {metric} metric reported; instrument the script first.")
    return "\n".join(lines)


def advise(
    observation: Observation,
    strategy: StrategyReport,
    history_summary: str,
    backend: Backend,
    plot_paths: tuple[str, ...] = (),
    epsilon: float = 1e-3,
    primary_metric: str = "rel_l2",
) -> tuple[str, bool]:
    """Post-run advisory prose; returns (text, degraded_flag)."""
    attachments = plot_paths if backend.supports_images("advisor") else ()
    metrics_text = ", ".join(
        f"{key}={observation.metrics[key]:.6e}" for key in sorted(observation.metrics)
    )
    try:
        response = backend.complete(
            ChatRequest(
                role_id="advisor",
                system_prompt=ROLE_CHARTERS["advisor"],
                messages=(
                    ("user",
                     f"STRATEGY UNDER TEST:\n{strategy.narrative}\n\n"
                     f"HISTORY:\n{history_summary or '(first iteration)'}\n\n"
                     f"RUN RESULT: exit_code={observation.exit_code}, "
                     f"metrics: {metrics_text or '(none)'}\n"
                     f"artifacts: {', '.join(observation.artifact_paths) or '(none)'}\n"
                     f"LOG TAIL:\n{observation.log_excerpt}"),
                ),
                attachments=attachments,
            )
        )
        return response.text, False
    except MissingFixtureError:
        raise
    except BackendError:
        return _degraded_report(observation, epsilon, primary_metric), True


def parse_advisor(
    raw: str, backend: Backend, max_iteration: int | None = None
) -> StructuredDiagnosis:
    """Advisor prose to StructuredDiagnosis; one re-ask, then a hard error."""
    if not raw.strip():
        raise PolicyError("advisor text must be non-empty")

    def parse(reply: str) -> StructuredDiagnosis:
        data = parse_json_object(reply)
        grades_raw = data.get("grades")
        if not isinstance(grades_raw, dict):
            raise ValueError("grades must be an object")
        grades = AdvisorGrades.from_dict(grades_raw)
        decision = data.get("continue_or_stop")
        if decision not in DECISIONS:
            raise ValueError(f"continue_or_stop must be one of {DECISIONS}")
        revert = data.get("revert_iteration")
        if revert is not None and (isinstance(revert, bool) or not isinstance(revert, int)):
            raise ValueError("revert_iteration must be an integer")
        if decision == "revert_to" and max_iteration is not None:
            if revert is None or not (1 <= revert <= max_iteration):
                raise ValueError(
                    f"revert_iteration must reference an existing iteration "
                    f"(1..{max_iteration})"
                )
        failure_modes = data.get("failure_modes", [])
        if not isinstance(failure_modes, list):
            raise ValueError("failure_modes must be a list")
        return StructuredDiagnosis(
            failure_modes=tuple(str(m) for m in failure_modes),
            prescribed_cure=str(data.get("prescribed_cure", "")),
            grades=grades,
            continue_or_stop=decision,
            revert_iteration=revert,
            extras=data.get("extras", {}) if isinstance(data.get("extras"), dict) else {},
        )

    try:
        diagnosis, _ = ask_structured(
            backend,
            ChatRequest(
                role_id="advisor_parser",
                system_prompt=ROLE_CHARTERS["advisor_parser"],
                messages=(
                    ("user",
                     "Convert this advisory into the diagnosis JSON schema "
                     "{failure_modes, prescribed_cure, grades: {details_grade "
                     "0..15, optimality_grade 0..15, consistency_grade 0..1, "
                     "rationale}, continue_or_stop: continue|revert_to|"
                     "stop_success|stop_exhausted, revert_iteration?, extras}."
                     f"\n\nADVISORY:\n{raw}"),
                ),
                response_schema="structured_diagnosis",
            ),
            parse,
        )
    except StructuredParseError as exc:
        raise PolicyError(
            f"advisor report unparseable after retry: {exc}; raw text: {raw[:500]}"
        ) from exc
    return diagnosis
