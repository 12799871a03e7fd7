"""Session driver: the full research loop from raw request to terminal state.

One SessionRunner owns one session: it formalizes the request, routes it,
then runs the iteration pipeline (summarize -> strategy -> gate -> implement
-> execute -> debug -> advise -> score -> register -> gate) until a stop
condition fires. All externally visible steps land in the event log; every
completed iteration lands in the trial log as exactly one record. Stage
failures inside an iteration become integrity-zero records rather than
crashes, so a session always reaches a terminal status.

Determinism contract: with a fixture backend and the logical clock, two runs
of the same request produce byte-identical event and trial logs. Nothing
wall-clock-derived and no absolute path is ever persisted in that mode.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path
from typing import Any

from .backend import Backend, BackendError, ChatRequest, MissingFixtureError
from .bandit import (
    Action,
    CodeStateRef,
    Observation,
    RewardBreakdown,
    TrialHistory,
    TrialRecord,
)
from .cells import (
    CellScript,
    PatchApplicationError,
    apply_patch,
    parse_cells,
    render_cells,
    source_hash,
)
from .config import SessionConfig, derive_session_id
from .events import EventLog, read_events
from .implement import ImplementError, emit_patch, implement, plan_targets
from .intake import (
    FormalProblem,
    IntakeError,
    ReferenceData,
    RoutingDecision,
    RoutingStep,
    UnroutableError,
    formalize_request,
    route,
)
from .policy import (
    PolicyError,
    StrategyContext,
    StrategyReport,
    StructuredDiagnosis,
    advise,
    parse_advisor,
    strategy_loop,
)
from .rewards import AdvisorGrades, compose_reward, score_accuracy, score_integrity
from .sandbox import (
    SandboxError,
    assign_project_name,
    collect_artifacts,
    debug_report,
    execute,
    log_excerpt,
    next_version,
    write_code_state,
)
from .scaffolding import (
    ROLE_CHARTERS,
    BlueprintRegistry,
    compose_system_prompt,
    load_blueprints,
    summarize_history,
)
from .serde import canonical_dumps
from .store import (
    CodeStore,
    GenerationError,
    NoTemplateError,
    StoreError,
    collect_modules,
    deposit_validated,
    generate_missing_module,
    index_store,
    retrieve_template,
    syntactic_check,
    validate_template,
)
from .structured import StructuredParseError, ask_structured, parse_json_object
from .triallog import register_trial
from . import triallog

logger = logging.getLogger(__name__)

RUNNING = "running"
WAITING_INTERVENTION = "waiting_intervention"
SUCCEEDED = "succeeded"
EXHAUSTED = "exhausted"
ABORTED = "aborted"
TERMINAL_STATUSES = (SUCCEEDED, EXHAUSTED, ABORTED)

_TRANSITIONS: dict[str, set[str]] = {
    RUNNING: {WAITING_INTERVENTION, SUCCEEDED, EXHAUSTED, ABORTED},
    WAITING_INTERVENTION: {RUNNING, ABORTED},
    SUCCEEDED: set(),
    EXHAUSTED: set(),
    ABORTED: set(),
}

GATE_IDS = ("pre_strategy_commit", "post_advisor", "abort")


class OrchestratorError(Exception):
    pass


class StateTransitionError(OrchestratorError):
    pass


class GateMismatchError(OrchestratorError):
    """An intervention named a gate the session is not waiting at."""

    def __init__(self, expected: str | None, got: str):
        self.expected = expected
        self.got = got
        super().__init__(f"session is waiting at {expected!r}, not {got!r}")


class SessionAborted(Exception):
    """Internal control flow: an abort intervention arrived."""


class WallClock:
    def now(self) -> float:
        return time.time()


class LogicalClock:
    """Counts calls; replaces wall time so logs are replay-stable."""

    def __init__(self) -> None:
        self._tick = 0.0
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            self._tick += 1.0
            return self._tick


def make_clock(kind: str) -> WallClock | LogicalClock:
    return LogicalClock() if kind == "logical" else WallClock()


@dataclass(frozen=True)
class GateOutcome:
    gate_id: str
    auto_approved: bool
    aborted: bool


class GateController:
    """Intervention gates: blocking in interactive mode, queueing otherwise.

    Directives from any source land in one queue and are drained at the next
    iteration start, so a directive always binds the next strategist context.
    """

    def __init__(self, mode: str, timeout_seconds: float):
        self._mode = mode
        self._timeout = timeout_seconds
        self._cond = threading.Condition()
        self._waiting_gate: str | None = None
        self._resolved = False
        self._queued: list[str] = []
        self._aborted = False

    @property
    def aborted(self) -> bool:
        with self._cond:
            return self._aborted

    @property
    def waiting_gate(self) -> str | None:
        with self._cond:
            return self._waiting_gate if not self._resolved else None

    def drain_directives(self) -> tuple[str, ...]:
        with self._cond:
            out = tuple(self._queued)
            self._queued.clear()
            return out

    def wait(self, gate_id: str) -> GateOutcome:
        """Block (interactive) until resolved, timed out, or aborted."""
        with self._cond:
            if self._aborted:
                return GateOutcome(gate_id, auto_approved=False, aborted=True)
            if self._mode != "interactive":
                return GateOutcome(gate_id, auto_approved=False, aborted=False)
            self._waiting_gate = gate_id
            self._resolved = False
            deadline = time.monotonic() + self._timeout
            while not self._resolved and not self._aborted:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(timeout=remaining)
            auto = not self._resolved and not self._aborted
            self._waiting_gate = None
            if auto:
                logger.warning("gate %s timed out; auto-approving", gate_id)
            return GateOutcome(gate_id, auto_approved=auto, aborted=self._aborted)

    def resolve(self, gate_id: str, directive: str = "") -> dict[str, Any]:
        """Route an intervention; raises GateMismatchError on a stale gate."""
        if gate_id not in GATE_IDS:
            raise ValueError(f"unknown gate {gate_id!r}; valid gates: {GATE_IDS}")
        with self._cond:
            if gate_id == "abort":
                self._aborted = True
                self._resolved = True
                self._cond.notify_all()
                return {"gate": gate_id, "accepted": True, "queued": False}
            if self._mode == "interactive":
                if self._waiting_gate != gate_id or self._resolved:
                    raise GateMismatchError(
                        self._waiting_gate if not self._resolved else None, gate_id
                    )
                if directive.strip():
                    self._queued.append(directive.strip())
                self._resolved = True
                self._cond.notify_all()
                return {"gate": gate_id, "accepted": True, "queued": bool(directive.strip())}
            if directive.strip():
                self._queued.append(directive.strip())
            return {"gate": gate_id, "accepted": True, "queued": bool(directive.strip())}


@dataclass
class SessionState:
    session_id: str
    problem: FormalProblem
    routing: RoutingDecision
    history: TrialHistory
    status: str = RUNNING
    project_dir: Path | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "problem": self.problem.to_dict(),
            "routing": self.routing.to_dict(),
            "status": self.status,
            "iterations": len(self.history),
        }


def transition(state: SessionState, new_status: str) -> None:
    allowed = _TRANSITIONS.get(state.status, set())
    if new_status not in allowed:
        raise StateTransitionError(f"cannot move from {state.status} to {new_status}")
    state.status = new_status


def render_problem(problem: FormalProblem) -> str:
    lines = [f"TITLE: {problem.title}", f"TASK: {problem.pde_or_task}"]
    if problem.domain_spec:
        lines.append(f"DOMAIN: {problem.domain_spec}")
    if problem.boundary_conditions:
        lines.append(f"BOUNDARY CONDITIONS: {problem.boundary_conditions}")
    if problem.initial_conditions:
        lines.append(f"INITIAL CONDITIONS: {problem.initial_conditions}")
    if problem.reference_data is not None:
        note = problem.reference_data.format_notes
        lines.append(
            f"REFERENCE DATA: {problem.reference_data.path}"
            + (f" ({note})" if note else "")
        )
    lines.append(f"PROBLEM CLASS: {problem.problem_class}")
    if problem.outputs_required:
        lines.append("REQUIRED OUTPUTS: " + ", ".join(problem.outputs_required))
    if problem.ill_posed:
        lines.append(f"POSEDNESS FLAG: {problem.clarification}")
    return "\n".join(lines)


def max_backend_calls(
    config: SessionConfig, cell_cap: int = 64, module_cap: int = 8
) -> int:
    """Closed-form ceiling on chat calls for one session; asserted in tests.

    Every structured ask costs at most 2 calls (one re-ask). Counts are
    deliberately generous; the point is that the bound is finite and
    computable from config caps alone.
    """
    per_ask = 2
    strategy = config.strategy_max_rounds * 2 * per_ask
    implement_rounds = config.inspector_cap * (1 + per_ask + cell_cap * per_ask + per_ask)
    librarian = module_cap * 2 * per_ask
    structural = per_ask + librarian + 2 * per_ask
    debug = config.max_debug_rounds * (per_ask + 1 + per_ask + cell_cap * per_ask)
    advisory = 1 + per_ask
    per_iteration = 1 + strategy + structural + implement_rounds + debug + advisory
    intake = 3 * per_ask
    deposit = 2 * per_ask
    steps = 4
    return intake + config.max_iterations * per_iteration + steps * deposit


class SessionRunner:
    """Owns one session end to end; single loop thread, many readers."""

    def __init__(
        self,
        config: SessionConfig,
        backend: Backend,
        store: CodeStore | None = None,
        registry: BlueprintRegistry | None = None,
        session_id: str = "",
    ):
        self.config = config
        self.backend = backend
        self.clock = make_clock(config.clock)
        self.registry = registry or load_blueprints()
        root = Path(config.runtime.workdir_root)
        root.mkdir(parents=True, exist_ok=True)
        self.store = store if store is not None else CodeStore(root / "store")
        self.gates = GateController(config.mode, config.gate_timeout_seconds)
        self.session_id = session_id
        self.state: SessionState | None = None
        self.events: EventLog | None = None
        self.error: str = ""
        self._prestate_status = RUNNING
        self._trials_path: Path | None = None
        self._current_script: CellScript | None = None
        self._current_source: str = ""
        self._last_action: Action | None = None
        self._last_diagnosis: StructuredDiagnosis | None = None
        self._pending_notes: dict[str, Any] = {}

    @property
    def status(self) -> str:
        return self.state.status if self.state is not None else self._prestate_status

    # -- session lifecycle -------------------------------------------------

    def run(self, request_text: str) -> SessionState:
        try:
            problem = formalize_request(request_text, self.backend)
            routing = route(problem, self.backend)
        except (IntakeError, StructuredParseError) as exc:
            self._prestate_status = ABORTED
            self.error = f"{type(exc).__name__}: {exc}"
            if isinstance(exc, UnroutableError):
                logger.error("unroutable request; escalation: %s", exc.escalation)
            raise

        project_dir = assign_project_name(
            problem, self.backend, Path(self.config.runtime.workdir_root)
        )
        if not self.session_id:
            self.session_id = derive_session_id(self.config, request_text)
        self.events = EventLog(self.session_id, self.clock.now, project_dir / "events.jsonl")
        self._trials_path = project_dir / "trials.jsonl"
        self.state = SessionState(
            session_id=self.session_id,
            problem=problem,
            routing=routing,
            history=TrialHistory(self.session_id),
            project_dir=project_dir,
        )
        self._write_meta()

        try:
            if problem.ill_posed:
                self._clarification_gate(problem)
            final_status = RUNNING
            produced: list[tuple[str, tuple[str, ...]]] = []
            for step_index, step in enumerate(routing.steps):
                step_problem = self._thread_reference(step, produced)
                step_status = self._run_step(step_index, step.group, step_problem)
                last_artifacts: tuple[str, ...] = ()
                if len(self.state.history):
                    last_artifacts = self.state.history.last().observation.artifact_paths
                produced.append((step_status, last_artifacts))
                final_status = step_status
                if step_status != SUCCEEDED:
                    break
            transition(self.state, final_status if final_status != RUNNING else EXHAUSTED)
        except SessionAborted:
            if self.state.status == WAITING_INTERVENTION:
                transition(self.state, ABORTED)
            elif self.state.status not in TERMINAL_STATUSES:
                transition(self.state, ABORTED)
        except MissingFixtureError:
            if self.state.status not in TERMINAL_STATUSES:
                transition(self.state, ABORTED)
            self._finish()
            raise
        except Exception as exc:
            self.error = f"{type(exc).__name__}: {exc}"
            if self.state.status not in TERMINAL_STATUSES:
                transition(self.state, ABORTED)
            self._finish()
            raise
        self._finish()
        return self.state

    def _finish(self) -> None:
        assert self.state is not None and self.events is not None
        if not self.events.terminal_seen:
            rewards = self.state.history.rewards()
            payload: dict[str, Any] = {
                "status": self.state.status,
                "iterations": len(self.state.history),
                "rewards": rewards,
            }
            if rewards:
                payload["best_reward"] = max(rewards)
            if self.error:
                payload["error"] = self.error
            self.events.append("terminal", payload)
        self._write_meta()

    def _write_meta(self) -> None:
        assert self.state is not None and self.state.project_dir is not None
        meta = dict(self.state.to_dict())
        meta["mode"] = self.config.mode
        meta["clock"] = self.config.clock
        if self.error:
            meta["error"] = self.error
        path = self.state.project_dir / "session.json"
        path.write_text(canonical_dumps(meta) + "\n", encoding="utf-8")

    def _clarification_gate(self, problem: FormalProblem) -> None:
        """Ill-posed intake: interactive sessions pause for guidance."""
        if self.config.mode != "interactive":
            logger.warning(
                "proceeding despite posedness flag: %s", problem.clarification
            )
            return
        self._gate(
            "pre_strategy_commit",
            {"iteration": 0, "clarification": problem.clarification},
            self._pending_notes,
        )

    def _thread_reference(
        self, step: RoutingStep, produced: list[tuple[str, tuple[str, ...]]]
    ) -> FormalProblem:
        """Hybrid routes: feed an earlier step's artifact path forward.

        Paths stay project-dir-relative (vNNN/name) to keep logs portable.
        """
        if step.consumes_step is None:
            return step.problem
        _, artifacts = produced[step.consumes_step]
        if not artifacts:
            logger.warning(
                "step consumes step %d which produced no artifacts", step.consumes_step
            )
            return step.problem
        data_like = [p for p in artifacts if not p.endswith(".png")]
        pick = data_like[0] if data_like else artifacts[0]
        return dc_replace(
            step.problem,
            reference_data=ReferenceData(
                path=pick,
                format_notes=f"produced by routing step {step.consumes_step}",
            ),
        )

    # -- one routing step --------------------------------------------------

    def _run_step(self, step_index: int, group: str, problem: FormalProblem) -> str:
        assert self.state is not None
        self._current_script = None
        self._current_source = ""
        self._last_diagnosis = None
        self._last_action = None
        while True:
            if self.gates.aborted:
                raise SessionAborted()
            if len(self.state.history) >= self.config.max_iterations:
                return EXHAUSTED
            record, diagnosis = self._run_iteration(step_index, group, problem)
            decision = self._stop_check(record, diagnosis)
            if decision == SUCCEEDED:
                self._deposit(problem, group, record)
                return SUCCEEDED
            if decision == EXHAUSTED:
                return EXHAUSTED
            if isinstance(decision, tuple):
                self._revert_to(decision[1])

    def _stop_check(
        self, record: TrialRecord, diagnosis: StructuredDiagnosis
    ) -> str | tuple[str, int]:
        assert self.state is not None
        total = record.reward.total()
        if (
            diagnosis.continue_or_stop == "stop_success"
            and total >= self.config.reward_stop_threshold
        ):
            return SUCCEEDED
        if diagnosis.continue_or_stop == "stop_exhausted":
            return EXHAUSTED
        if len(self.state.history) >= self.config.max_iterations:
            return EXHAUSTED
        if diagnosis.continue_or_stop == "revert_to":
            assert diagnosis.revert_iteration is not None
            return ("revert", diagnosis.revert_iteration)
        return RUNNING

    def _revert_to(self, iteration: int) -> None:
        """Restore iteration k's code state for the next context; history stays."""
        assert self.state is not None and self.state.project_dir is not None
        record = self.state.history.records[iteration - 1]
        path = self.state.project_dir / record.code_state_ref.path
        source = path.read_text(encoding="utf-8")
        self._current_script = parse_cells(source)
        self._current_source = source
        self._last_action = record.action
        self._pending_notes["reverted_to"] = iteration
        logger.info("reverted working code state to iteration %d", iteration)

    def _deposit(self, problem: FormalProblem, group: str, record: TrialRecord) -> None:
        if not self._current_source:
            return
        hint = {
            "title": problem.title,
            "group": group,
            "arm": "/".join(record.action.arm()),
            "method": record.action.rep,
        }
        try:
            deposit_validated(
                self._current_source, hint, self.store, self.backend, "succeeded"
            )
        except MissingFixtureError:
            raise
        except (StoreError, BackendError, StructuredParseError) as exc:
            logger.warning("deposit skipped: %s", exc)

    # -- one iteration -----------------------------------------------------

    def _run_iteration(
        self, step_index: int, group: str, problem: FormalProblem
    ) -> tuple[TrialRecord, StructuredDiagnosis]:
        assert self.state is not None and self.events is not None
        iteration = len(self.state.history) + 1
        started = self.clock.now()
        extras: dict[str, Any] = {"step_index": step_index, "group": group}
        extras.update(self._pending_notes)
        self._pending_notes = {}
        directives = self.gates.drain_directives()
        if directives:
            extras["directives"] = list(directives)
        try:
            return self._iteration_pipeline(
                iteration, started, group, problem, directives, extras
            )
        except SessionAborted:
            raise
        except MissingFixtureError:
            raise
        except (
            ImplementError,
            PatchApplicationError,
            StoreError,
            PolicyError,
            SandboxError,
            StructuredParseError,
            BackendError,
        ) as exc:
            logger.error("iteration %d stage error: %s", iteration, exc)
            return self._record_stage_error(iteration, started, extras, exc)

    def _iteration_pipeline(
        self,
        iteration: int,
        started: float,
        group: str,
        problem: FormalProblem,
        directives: tuple[str, ...],
        extras: dict[str, Any],
    ) -> tuple[TrialRecord, StructuredDiagnosis]:
        assert self.state is not None and self.events is not None
        config = self.config
        runtime = config.runtime
        history = self.state.history

        summary = summarize_history(
            history,
            config.context_budget_tokens,
            self.backend,
            config.recent_records_verbatim,
        )

        bundle = compose_system_prompt(
            "strategist",
            group,
            self.registry,
            action_space=config.action_space,
            max_budget=config.context_budget_tokens,
        )
        context = StrategyContext(
            bundle=bundle,
            problem_text=render_problem(problem),
            action_space=config.action_space,
            history_summary=summary,
            prior_diagnosis=self._last_diagnosis,
            binding_directives=directives,
        )

        def on_round(report: StrategyReport, critique: Any, round_idx: int) -> None:
            self.events.append(
                "strategy_proposed",
                {
                    "iteration": iteration,
                    "round": round_idx,
                    "binding_directives": list(directives),
                    "report": report.to_dict(),
                },
            )
            self.events.append(
                "critique",
                {"iteration": iteration, "round": round_idx, **critique.to_dict()},
            )

        loop_result = strategy_loop(
            context, self.backend, config.strategy_max_rounds, on_round
        )
        strategy = loop_result.report
        extras["strategy_rounds"] = loop_result.rounds
        if loop_result.force_accepted:
            extras["strategy_force_accepted"] = True

        self._gate(
            "pre_strategy_commit",
            {
                "iteration": iteration,
                "action": strategy.action.to_dict(),
                "narrative": strategy.narrative,
            },
            extras,
        )

        structural = (
            self._current_script is None
            or self._last_action is None
            or strategy.action.rep != self._last_action.rep
            or strategy.action.constraint != self._last_action.constraint
        )
        if structural:
            base_source = self._structural_base(problem, strategy, extras)
            modules = self._gather_modules(strategy, base_source, extras)
            impl = implement(
                strategy, base_source, modules, None, self.backend, config.inspector_cap
            )
        else:
            impl = implement(
                strategy, None, [], self._current_script, self.backend, config.inspector_cap
            )
        if impl.force_forwarded:
            extras["force_forwarded"] = True
        if impl.plan_repairs:
            extras["plan_repairs"] = list(impl.plan_repairs)

        script = impl.script
        source = impl.source
        vdir = next_version(self.state.project_dir)
        write_code_state(vdir, runtime, source)
        self.events.append(
            "code_state",
            {
                "iteration": iteration,
                "version": vdir.name,
                "sha256": impl.sha256,
                "cell_count": len(script.cells),
                "debug_round": 0,
            },
        )
        outcome = execute(vdir, runtime)
        self._emit_execution(iteration, vdir.name, outcome)

        debug_rounds = 0
        while (
            (outcome.exit_code != 0 or outcome.timed_out)
            and debug_rounds < config.max_debug_rounds
        ):
            report = debug_report(outcome, script, self.backend, runtime.main_filename)
            try:
                plan = plan_targets(report, script, self.backend)
                for idx, intent in plan.targets:
                    patch = emit_patch(script, idx, intent, self.backend)
                    script = apply_patch(script, patch)
            except (ImplementError, PatchApplicationError) as exc:
                extras["debug_abandoned"] = str(exc)
                break
            debug_rounds += 1
            source = render_cells(script)
            vdir = next_version(self.state.project_dir)
            write_code_state(vdir, runtime, source)
            self.events.append(
                "code_state",
                {
                    "iteration": iteration,
                    "version": vdir.name,
                    "sha256": source_hash(source),
                    "cell_count": len(script.cells),
                    "debug_round": debug_rounds,
                },
            )
            outcome = execute(vdir, runtime)
            self._emit_execution(iteration, vdir.name, outcome)
        extras["debug_rounds"] = debug_rounds

        manifest = collect_artifacts(vdir, runtime.artifact_patterns)
        metrics: dict[str, float] = {}
        for key, value in outcome.metrics.items():
            if isinstance(value, (int, float)) and math.isfinite(float(value)):
                metrics[key] = float(value)
            else:
                extras.setdefault("dropped_metrics", []).append(key)
        observation = Observation(
            exit_code=outcome.exit_code,
            log_excerpt=log_excerpt(outcome),
            metrics=metrics,
            artifact_paths=tuple(f"{vdir.name}/{e.name}" for e in manifest.entries),
        )

        plot_paths = tuple(
            str(vdir / e.name) for e in manifest.entries if e.name.endswith(".png")
        )
        advisory, degraded = advise(
            observation,
            strategy,
            summary,
            self.backend,
            plot_paths,
            config.scoring.epsilon,
            config.scoring.primary_metric,
        )
        self.events.append(
            "advisor_report",
            {"iteration": iteration, "degraded": degraded, "text": advisory},
        )
        if degraded:
            diagnosis = self._degraded_diagnosis(observation)
            extras["degraded_advisory"] = True
        else:
            diagnosis = parse_advisor(advisory, self.backend, max_iteration=iteration)

        integrity = score_integrity(outcome, manifest, config.scoring)
        accuracy = score_accuracy(observation.metrics, diagnosis.grades, config.scoring)
        reward = compose_reward(integrity, accuracy, diagnosis.grades)
        self.events.append(
            "reward",
            {
                "iteration": iteration,
                "breakdown": reward.to_dict(),
                "total": reward.total(),
                "decision": diagnosis.continue_or_stop,
                "prescribed_cure": diagnosis.prescribed_cure,
            },
        )

        action = dc_replace(strategy.action, iteration=iteration)
        record = TrialRecord(
            iteration=iteration,
            action=action,
            code_state_ref=CodeStateRef(
                path=f"{vdir.name}/{runtime.main_filename}",
                sha256=source_hash(source),
            ),
            observation=observation,
            reward=reward,
            diagnosis=diagnosis.to_dict(),
            started=started,
            ended=self.clock.now(),
            extras=extras,
        )
        assert self._trials_path is not None
        register_trial(record, self.session_id, self._trials_path)
        history.append(record)
        self._current_script = script
        self._current_source = source
        self._last_action = action
        self._last_diagnosis = diagnosis

        self._gate(
            "post_advisor",
            {
                "iteration": iteration,
                "total": reward.total(),
                "decision": diagnosis.continue_or_stop,
                "prescribed_cure": diagnosis.prescribed_cure,
            },
            self._pending_notes,
        )
        return record, diagnosis

    def _emit_execution(self, iteration: int, version: str, outcome: Any) -> None:
        assert self.events is not None
        metrics = {
            k: float(v)
            for k, v in outcome.metrics.items()
            if isinstance(v, (int, float)) and math.isfinite(float(v))
        }
        self.events.append(
            "execution",
            {
                "iteration": iteration,
                "version": version,
                "exit_code": outcome.exit_code,
                "timed_out": outcome.timed_out,
                "metrics": metrics,
            },
        )

    def _record_stage_error(
        self, iteration: int, started: float, extras: dict[str, Any], exc: Exception
    ) -> tuple[TrialRecord, StructuredDiagnosis]:
        """A broken stage still yields one honest, zero-integrity record."""
        assert self.state is not None
        extras["error"] = f"{type(exc).__name__}: {exc}"
        space = self.config.action_space
        action = self._last_action or Action(
            rep=space.rep_options[0],
            constraint=space.constraint_options[0],
            opt=space.opt_options[0],
            free_text_plan="(stage error before strategy commit)",
        )
        action = dc_replace(action, iteration=iteration)
        diagnosis = StructuredDiagnosis(
            failure_modes=(f"stage error: {type(exc).__name__}",),
            prescribed_cure="Repair the pipeline stage failure before retrying.",
            grades=AdvisorGrades(0.0, 0.0, 0.0, rationale="(stage error)"),
            continue_or_stop="continue",
        )
        record = TrialRecord(
            iteration=iteration,
            action=action,
            code_state_ref=CodeStateRef(path="", sha256=""),
            observation=Observation(
                exit_code=-1, log_excerpt=f"stage error: {exc}", metrics={}
            ),
            reward=RewardBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            diagnosis=diagnosis.to_dict(),
            started=started,
            ended=self.clock.now(),
            extras=extras,
        )
        assert self._trials_path is not None
        register_trial(record, self.session_id, self._trials_path)
        self.state.history.append(record)
        self._last_diagnosis = diagnosis
        return record, diagnosis

    def _degraded_diagnosis(self, observation: Observation) -> StructuredDiagnosis:
        scoring = self.config.scoring
        err = observation.metrics.get(scoring.primary_metric)
        if observation.exit_code != 0:
            modes: tuple[str, ...] = ("execution failure",)
            cure = "Repair the crash; no methodological change until the run completes."
        elif err is None:
            modes = ("missing primary metric",)
            cure = f"Report {scoring.primary_metric} via the metrics side channel."
        elif err <= scoring.epsilon:
            modes = ()
            cure = "Accuracy target met; hold the current configuration."
        else:
            modes = ("accuracy shortfall",)
            cure = "Continue refining the current approach."
        return StructuredDiagnosis(
            failure_modes=modes,
            prescribed_cure=cure,
            grades=AdvisorGrades(0.0, 0.0, 0.0, rationale="(degraded: advisor unavailable)"),
            continue_or_stop="continue",
            extras={"degraded": True},
        )

    # -- structural implementation inputs -----------------------------------

    def _structural_base(
        self, problem: FormalProblem, strategy: StrategyReport, extras: dict[str, Any]
    ) -> str:
        index = index_store(self.store, self.backend)
        query = f"{problem.title} {problem.pde_or_task} {strategy.narrative}"
        try:
            template = retrieve_template(query, index)
        except NoTemplateError as exc:
            extras["retrieval_miss"] = str(exc)
            return self._librarian_script(problem, strategy)
        verdict, rationale = validate_template(template, problem, self.backend)
        if verdict == "accepted":
            extras["template_id"] = template.id[:12]
            return template.source_text
        extras["template_rejected"] = rationale
        return self._librarian_script(problem, strategy)

    def _librarian_script(
        self, problem: FormalProblem, strategy: StrategyReport
    ) -> str:
        """No usable template: have the librarian write the whole script."""

        def parse(reply: str) -> str:
            data = parse_json_object(reply)
            source = data.get("source")
            if not isinstance(source, str) or not source.strip():
                raise ValueError("source must be a non-empty string")
            return source

        request = ChatRequest(
            role_id="librarian",
            system_prompt=ROLE_CHARTERS["librarian"],
            messages=(
                ("user",
                 f"Write a complete cell-delimited script for this problem.\n"
                 f"{render_problem(problem)}\n\nPLAN:\n{strategy.narrative}\n"
                 f"Arm: {'/'.join(strategy.action.arm())}\n"
                 "Use `# %% name` cell headers, write metrics to metrics.json, "
                 "and save required plots. Reply with JSON {\"source\": str}."),
            ),
            response_schema="module_source",
        )
        failure = ""
        for attempt in range(2):
            try:
                source, _ = ask_structured(self.backend, request, parse)
            except StructuredParseError as exc:
                raise ImplementError("generate", str(exc)) from exc
            failure = syntactic_check(source) or ""
            if not failure:
                return source
            if attempt == 0:
                request = ChatRequest(
                    role_id="librarian",
                    system_prompt=request.system_prompt,
                    messages=request.messages
                    + (
                        ("assistant", source),
                        ("user", f"That script failed validation:\n{failure}\n"
                                 "Fix it and reply with the same JSON shape."),
                    ),
                    response_schema="module_source",
                )
        raise ImplementError("generate", f"generated script failed validation twice: {failure}")

    def _gather_modules(
        self, strategy: StrategyReport, base_source: str, extras: dict[str, Any]
    ) -> list[tuple[str, str]]:
        names = [name for name in strategy.required_modules if name]
        if not names:
            return []
        collection = collect_modules(names, self.store)
        pairs = [(m.id, m.source_text) for m in collection.found]
        for missing in collection.missing:
            try:
                module = generate_missing_module(
                    missing, base_source[:2000], self.backend, self.store
                )
            except GenerationError as exc:
                raise ImplementError("generate", str(exc)) from exc
            pairs.append((module.id, module.source_text))
        if collection.missing:
            extras["generated_modules"] = list(collection.missing)
        return pairs

    # -- gates ---------------------------------------------------------------

    def _gate(
        self, gate_id: str, payload: dict[str, Any], extras_sink: dict[str, Any]
    ) -> None:
        assert self.state is not None and self.events is not None
        if self.gates.aborted:
            raise SessionAborted()
        if self.config.mode != "interactive":
            return
        transition(self.state, WAITING_INTERVENTION)
        self._write_meta()
        self.events.append("gate_waiting", {"gate": gate_id, **payload})
        outcome = self.gates.wait(gate_id)
        if outcome.aborted:
            raise SessionAborted()
        transition(self.state, RUNNING)
        self._write_meta()
        if outcome.auto_approved:
            gates = extras_sink.setdefault("auto_approved_gates", [])
            gates.append(gate_id)

    def inject_directive(self, gate_id: str, directive: str = "") -> dict[str, Any]:
        """API entry point; see GateController.resolve for the semantics."""
        return self.gates.resolve(gate_id, directive)


@dataclass(frozen=True)
class ReplayedSession:
    session_id: str
    status: str
    history: TrialHistory | None
    events: list
    meta: dict[str, Any] = field(default_factory=dict)


def replay_session(project_dir: Path) -> ReplayedSession:
    """Rebuild terminal state purely from the persisted logs."""
    project_dir = Path(project_dir)
    meta_path = project_dir / "session.json"
    if not meta_path.exists():
        raise OrchestratorError(f"{meta_path} does not exist")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    events = read_events(project_dir / "events.jsonl")
    if not events or events[-1].kind != "terminal":
        raise OrchestratorError("event log does not end with a terminal event")
    status = events[-1].payload.get("status", meta.get("status"))
    trials_path = project_dir / "trials.jsonl"
    history = triallog.replay(trials_path) if trials_path.exists() else None
    recorded = events[-1].payload.get("iterations", 0)
    observed = len(history) if history is not None else 0
    if recorded != observed:
        raise OrchestratorError(
            f"terminal event says {recorded} iterations, trial log has {observed}"
        )
    return ReplayedSession(
        session_id=meta["session_id"],
        status=status,
        history=history,
        events=events,
        meta=meta,
    )
