"""Strategist/critic loop and advisor parsing against recorded replies."""

import json

import pytest

from labloop.backend import BackendError, MissingFixtureError, MockBackend
from labloop.bandit import Action, ActionSpace, Observation
from labloop.policy import (
    DECISIONS,
    Critique,
    PolicyError,
    StrategyContext,
    StrategyReport,
    StructuredDiagnosis,
    advise,
    critique_strategy,
    parse_advisor,
    propose_strategy,
    strategy_loop,
)
from labloop.rewards import AdvisorGrades
from labloop.scaffolding import PromptBundle
from labloop.structured import StructuredParseError

SPACE = ActionSpace(
    rep_options=("mlp", "polynomials"),
    constraint_options=("strong_form", "weak_form"),
    opt_options=("adam",),
)

SPACE_ACTION = Action(rep="polynomials", constraint="strong_form", opt="adam")


def make_context(**overrides) -> StrategyContext:
    defaults = dict(
        bundle=PromptBundle(
            system_prompt="ROLE: strategist\nPlan one trial.",
            context_budget=12,
            included_blueprints=(),
        ),
        problem_text="Approximate u(x) = exp(-x) cos(2 pi x) on [0, 1].",
        action_space=SPACE,
    )
    defaults.update(overrides)
    return StrategyContext(**defaults)


def strategy_json(rep="polynomials", narrative="Fit a degree ladder.", **extra) -> str:
    body = {
        "action": {"rep": rep, "constraint": "strong_form", "opt": "adam"},
        "narrative": narrative,
        "required_modules": ["least_squares"],
        "training_plan": "sweep degrees 0..6",
        "acceptance_targets": {"rel_l2": 1e-3},
    }
    body.update(extra)
    return json.dumps(body)


def critique_json(verdict="accepted", requirements=()) -> str:
    return json.dumps(
        {
            "verdict": verdict,
            "requirements": list(requirements),
            "cited_principle": "match capacity to the data",
        }
    )


def diagnosis_json(**overrides) -> str:
    body = {
        "failure_modes": ["underfit"],
        "prescribed_cure": "raise the polynomial degree",
        "grades": {
            "details_grade": 7,
            "optimality_grade": 5,
            "consistency_grade": 1.0,
            "rationale": "clean run, coarse model",
        },
        "continue_or_stop": "continue",
        "extras": {"note": "keep the sampler"},
    }
    body.update(overrides)
    return json.dumps(body)


class TestReportAndCritique:
    def test_report_round_trip_sorts_targets(self):
        report = StrategyReport(
            action=SPACE_ACTION,
            narrative="n",
            required_modules=["b", "a"],
            acceptance_targets={"z_metric": 2.0, "a_metric": 1.0},
        )
        data = report.to_dict()
        assert list(data["acceptance_targets"]) == ["a_metric", "z_metric"]
        assert report.required_modules == ("b", "a")

    def test_critique_accepted_allows_empty_requirements(self):
        critique = Critique(verdict="accepted")
        assert critique.requirements == ()

    def test_critique_rejected_requires_requirements(self):
        with pytest.raises(ValueError, match="requirements"):
            Critique(verdict="rejected")

    def test_critique_bad_verdict(self):
        with pytest.raises(ValueError, match="verdict"):
            Critique(verdict="maybe")


class TestStructuredDiagnosis:
    def test_round_trip(self):
        diagnosis = StructuredDiagnosis(
            failure_modes=("underfit",),
            prescribed_cure="raise the degree",
            grades=AdvisorGrades(7, 5, 1.0, "ok"),
            continue_or_stop="continue",
        )
        again = StructuredDiagnosis.from_dict(diagnosis.to_dict())
        assert again == diagnosis

    def test_decisions_tuple_is_exhaustive(self):
        assert DECISIONS == ("continue", "revert_to", "stop_success", "stop_exhausted")

    def test_bad_decision_rejected(self):
        with pytest.raises(ValueError, match="continue_or_stop"):
            StructuredDiagnosis(
                failure_modes=(),
                prescribed_cure="",
                grades=AdvisorGrades(0, 0, 0.0, ""),
                continue_or_stop="halt",
            )

    def test_revert_requires_iteration(self):
        with pytest.raises(ValueError, match="revert_iteration"):
            StructuredDiagnosis(
                failure_modes=(),
                prescribed_cure="",
                grades=AdvisorGrades(0, 0, 0.0, ""),
                continue_or_stop="revert_to",
            )

    def test_revert_iteration_only_with_revert(self):
        with pytest.raises(ValueError, match="revert_iteration"):
            StructuredDiagnosis(
                failure_modes=(),
                prescribed_cure="",
                grades=AdvisorGrades(0, 0, 0.0, ""),
                continue_or_stop="continue",
                revert_iteration=2,
            )


class TestUserMessage:
    def test_minimal_message_has_problem_and_schema(self):
        text = make_context().user_message()
        assert text.startswith("PROBLEM:\n")
        assert "Reply with JSON" in text
        assert "BINDING DIRECTIVES" not in text
        assert "TRIAL HISTORY" not in text

    def test_sections_appear_in_fixed_order(self):
        context = make_context(
            history_summary="| iter | ... |",
            binding_directives=("jump straight to degree 6",),
            prior_requirements=("name the solver",),
            prior_diagnosis=StructuredDiagnosis(
                failure_modes=("underfit",),
                prescribed_cure="raise the degree",
                grades=AdvisorGrades(7, 5, 1.0, ""),
                continue_or_stop="continue",
            ),
        )
        text = context.user_message()
        order = [
            text.index("PROBLEM:"),
            text.index("BINDING DIRECTIVES"),
            text.index("TRIAL HISTORY:"),
            text.index("LATEST DIAGNOSIS:"),
            text.index("CRITIC REQUIREMENTS"),
            text.index("Reply with JSON"),
        ]
        assert order == sorted(order)
        assert "- jump straight to degree 6" in text
        assert "prescribed cure: raise the degree" in text


class TestProposeAndCritique:
    def test_propose_parses_validated_action(self):
        backend = MockBackend({("strategist", 1): strategy_json()})
        report = propose_strategy(make_context(), backend)
        assert report.action.rep == "polynomials"
        assert report.action.free_text_plan == report.narrative
        assert report.required_modules == ("least_squares",)
        assert report.acceptance_targets == {"rel_l2": 1e-3}

    def test_unknown_action_identifier_triggers_one_repair(self):
        backend = MockBackend(
            {
                ("strategist", 1): strategy_json(rep="transformer"),
                ("strategist", 2): strategy_json(),
            }
        )
        report = propose_strategy(make_context(), backend)
        assert report.action.rep == "polynomials"
        assert backend.calls == [("strategist", 1), ("strategist", 2)]

    def test_empty_narrative_exhausts_repair(self):
        backend = MockBackend(
            {
                ("strategist", 1): strategy_json(narrative="  "),
                ("strategist", 2): strategy_json(narrative=""),
            }
        )
        with pytest.raises(StructuredParseError):
            propose_strategy(make_context(), backend)

    def test_critique_parses_requirements(self):
        backend = MockBackend(
            {("critic", 1): critique_json("rejected", ["name the solver"])}
        )
        report = StrategyReport(action=SPACE_ACTION, narrative="n")
        critique = critique_strategy(report, make_context(), backend)
        assert critique.verdict == "rejected"
        assert critique.requirements == ("name the solver",)


class TestStrategyLoop:
    def test_accepted_first_round(self):
        backend = MockBackend(
            {
                ("strategist", 1): strategy_json(),
                ("critic", 1): critique_json(),
            }
        )
        result = strategy_loop(make_context(), backend)
        assert result.rounds == 1
        assert not result.force_accepted
        assert result.critique.verdict == "accepted"

    def test_rejection_feeds_requirements_back(self):
        backend = MockBackend(
            {
                ("strategist", 1): strategy_json(narrative="vague plan"),
                ("critic", 1): critique_json("rejected", ["name the solver"]),
                ("strategist", 2): strategy_json(narrative="adam on strong form"),
                ("critic", 2): critique_json(),
            }
        )
        context = make_context()
        result = strategy_loop(context, backend)
        assert result.rounds == 2
        assert not result.force_accepted
        assert context.prior_requirements == ("name the solver",)
        assert result.report.narrative == "adam on strong form"

    def test_force_accept_at_cap(self):
        entries = {}
        for idx in (1, 2, 3):
            entries[("strategist", idx)] = strategy_json(narrative=f"plan {idx}")
            entries[("critic", idx)] = critique_json("rejected", [f"req {idx}"])
        backend = MockBackend(entries)
        seen = []
        context = make_context()
        result = strategy_loop(
            context,
            backend,
            max_rounds=3,
            on_round=lambda report, critique, idx: seen.append(
                (report.narrative, critique.verdict, idx)
            ),
        )
        assert result.force_accepted
        assert result.rounds == 3
        assert result.report.narrative == "plan 3"
        assert [idx for _, _, idx in seen] == [1, 2, 3]
        assert context.prior_requirements == ("req 1", "req 2", "req 3")

    def test_rounds_must_be_positive(self):
        with pytest.raises(ValueError, match="max_rounds"):
            strategy_loop(make_context(), MockBackend({}), max_rounds=0)


class _SpyBackend(MockBackend):
    def __init__(self, entries):
        super().__init__(entries)
        self.requests = []

    def complete(self, request):
        self.requests.append(request)
        return super().complete(request)


class _DownBackend(MockBackend):
    def complete(self, request):
        raise BackendError("provider offline")


def observation(exit_code=0, metrics=None, artifacts=()):
    return Observation(
        exit_code=exit_code,
        log_excerpt="tail",
        metrics=metrics or {},
        artifact_paths=tuple(artifacts),
    )


def stub_report():
    return StrategyReport(action=SPACE_ACTION, narrative="degree ladder")


class TestAdvise:
    def test_success_passes_plots_when_supported(self):
        backend = _SpyBackend({("advisor", 1): "Increase the degree."})
        text, degraded = advise(
            observation(metrics={"rel_l2": 0.1}, artifacts=("v001/plot.png",)),
            stub_report(),
            "",
            backend,
            plot_paths=("v001/plot.png",),
        )
        assert (text, degraded) == ("Increase the degree.", False)
        request = backend.requests[0]
        assert request.attachments == ("v001/plot.png",)
        assert "rel_l2=1.000000e-01" in request.messages[0][1]

    def test_plots_dropped_without_image_support(self):
        backend = _SpyBackend({("advisor", 1): "ok"})
        backend.supports_images = lambda role_id: False
        advise(observation(), stub_report(), "", backend, plot_paths=("p.png",))
        assert backend.requests[0].attachments == ()

    def test_missing_fixture_is_not_degraded(self):
        with pytest.raises(MissingFixtureError):
            advise(observation(), stub_report(), "", MockBackend({}))

    def test_backend_error_degrades_to_rule_based_crash_advice(self):
        text, degraded = advise(
            observation(exit_code=2), stub_report(), "", _DownBackend({})
        )
        assert degraded
        assert text.startswith("(degraded rule-based advisory")
        assert "exit code 2" in text
        assert "repair the crash" in text

    def test_degraded_advice_when_target_met(self):
        text, degraded = advise(
            observation(metrics={"rel_l2": 5e-4}), stub_report(), "", _DownBackend({})
        )
        assert degraded and "consider stopping" in text

    def test_degraded_advice_when_target_missed(self):
        text, degraded = advise(
            observation(metrics={"rel_l2": 0.05}), stub_report(), "", _DownBackend({})
        )
        assert degraded and "continue" in text

    def test_degraded_advice_when_metric_absent(self):
        text, degraded = advise(
            observation(), stub_report(), "", _DownBackend({})
        )
        assert degraded and "instrument the script first" in text


class TestParseAdvisor:
    def test_happy_path(self):
        backend = MockBackend({("advisor_parser", 1): diagnosis_json()})
        diagnosis = parse_advisor("The model underfits; raise the degree.", backend)
        assert diagnosis.failure_modes == ("underfit",)
        assert diagnosis.grades.details_grade == 7
        assert diagnosis.continue_or_stop == "continue"
        assert diagnosis.extras == {"note": "keep the sampler"}

    def test_empty_advisory_rejected(self):
        with pytest.raises(PolicyError, match="non-empty"):
            parse_advisor("   ", MockBackend({}))

    def test_revert_must_reference_existing_iteration(self):
        good = diagnosis_json(continue_or_stop="revert_to", revert_iteration=2)
        backend = MockBackend(
            {
                ("advisor_parser", 1): diagnosis_json(
                    continue_or_stop="revert_to", revert_iteration=9
                ),
                ("advisor_parser", 2): good,
            }
        )
        diagnosis = parse_advisor("revert", backend, max_iteration=3)
        assert diagnosis.revert_iteration == 2
        assert backend.total_calls == 2

    def test_boolean_revert_iteration_rejected(self):
        backend = MockBackend(
            {
                ("advisor_parser", 1): diagnosis_json(
                    continue_or_stop="revert_to", revert_iteration=True
                ),
                ("advisor_parser", 2): diagnosis_json(
                    continue_or_stop="revert_to", revert_iteration=1
                ),
            }
        )
        diagnosis = parse_advisor("revert", backend, max_iteration=2)
        assert diagnosis.revert_iteration == 1

    def test_unparseable_after_retry_carries_raw_excerpt(self):
        raw = "x" * 600
        backend = MockBackend(
            {("advisor_parser", 1): "not json", ("advisor_parser", 2): "still not"}
        )
        with pytest.raises(PolicyError) as err:
            parse_advisor(raw, backend)
        assert "after retry" in str(err.value)
        assert raw[:500] in str(err.value)
