"""End-to-end session runs on the recorded transcripts, plus loop plumbing."""

import json
import threading
import time

import pytest

from labloop import triallog
from labloop.cells import source_hash
from labloop.events import read_events
from labloop.intake import FormalProblem
from labloop.orchestrator import (
    ABORTED,
    EXHAUSTED,
    GATE_IDS,
    RUNNING,
    SUCCEEDED,
    TERMINAL_STATUSES,
    GateController,
    GateMismatchError,
    LogicalClock,
    OrchestratorError,
    SessionRunner,
    SessionState,
    StateTransitionError,
    WallClock,
    make_clock,
    max_backend_calls,
    render_problem,
    replay_session,
    transition,
)
from labloop.store import CodeStore, content_hash

from conftest import builder, fixture_backend, make_config

ITERATION_KINDS = [
    "strategy_proposed",
    "critique",
    "code_state",
    "execution",
    "advisor_report",
    "reward",
]


class TestMainSession:
    def test_runs_to_success(self, main_run):
        runner, state = main_run
        assert state.status == SUCCEEDED
        assert runner.status == SUCCEEDED
        assert runner.backend.total_calls == 29

    def test_reward_trajectory(self, main_run):
        _, state = main_run
        totals = state.history.rewards()
        assert totals == pytest.approx([62.0, 81.0, 96.0])

    def test_records_are_contiguous_and_clocked(self, main_run):
        _, state = main_run
        iterations = [r.iteration for r in state.history.records]
        assert iterations == [1, 2, 3]
        for record in state.history.records:
            assert record.ended >= record.started > 0.0

    def test_committed_action_is_recorded(self, main_run):
        _, state = main_run
        for record in state.history.records:
            assert record.action.rep == "polynomials"
            assert record.action.constraint == "strong_form"
            assert record.action.opt == "adam"
            assert record.action.iteration == record.iteration

    def test_code_state_refs_resolve_and_hash(self, main_run):
        _, state = main_run
        for record in state.history.records:
            ref = record.code_state_ref
            assert ref.path == f"v{record.iteration:03d}/main.py"
            source = (state.project_dir / ref.path).read_text(encoding="utf-8")
            assert source_hash(source) == ref.sha256

    def test_metric_progression(self, main_run):
        _, state = main_run
        observed = [r.observation.metrics["rel_l2"] for r in state.history.records]
        assert observed == pytest.approx([0.1, 0.1 * 10.0 ** -1.5, 1e-4])

    def test_artifacts_are_relative_and_sorted(self, main_run):
        _, state = main_run
        last = state.history.last()
        names = [p.rsplit("/", 1)[-1] for p in last.observation.artifact_paths]
        assert names == sorted(names)
        assert set(names) >= {
            "summary_all.png",
            "loss_history.png",
            "residual_trace.csv",
        }
        for path in last.observation.artifact_paths:
            assert not path.startswith("/")
            assert (state.project_dir / path).is_file()

    def test_event_stream_shape(self, main_run):
        _, state = main_run
        events = read_events(state.project_dir / "events.jsonl")
        assert [e.seq for e in events] == list(range(1, len(events) + 1))
        assert len(events) == 3 * len(ITERATION_KINDS) + 1
        assert events[-1].kind == "terminal"
        assert sum(1 for e in events if e.kind == "terminal") == 1
        assert all(e.kind != "gate_waiting" for e in events)
        for iteration in (1, 2, 3):
            kinds = [
                e.kind for e in events if e.payload.get("iteration") == iteration
            ]
            assert kinds == ITERATION_KINDS

    def test_terminal_event_payload(self, main_run):
        _, state = main_run
        events = read_events(state.project_dir / "events.jsonl")
        payload = events[-1].payload
        assert payload["status"] == SUCCEEDED
        assert payload["iterations"] == 3
        assert payload["rewards"] == pytest.approx([62.0, 81.0, 96.0])
        assert payload["best_reward"] == pytest.approx(96.0)

    def test_trial_log_replays_identically(self, main_run):
        _, state = main_run
        replayed = triallog.replay(state.project_dir / "trials.jsonl")
        assert replayed.session_id == state.session_id
        assert replayed.records == state.history.records

    def test_session_meta(self, main_run):
        _, state = main_run
        meta = json.loads(
            (state.project_dir / "session.json").read_text(encoding="utf-8")
        )
        assert meta["session_id"] == state.session_id
        assert meta["status"] == SUCCEEDED
        assert meta["iterations"] == 3
        assert meta["mode"] == "autonomous"
        assert meta["clock"] == "logical"
        assert meta["problem"]["title"]

    def test_replay_session_reconstructs_terminal_state(self, main_run):
        _, state = main_run
        replayed = replay_session(state.project_dir)
        assert replayed.session_id == state.session_id
        assert replayed.status == SUCCEEDED
        assert replayed.history.records == state.history.records
        assert replayed.events == read_events(state.project_dir / "events.jsonl")
        assert replayed.meta["iterations"] == 3


class TestSeededSession:
    def test_retrieval_hit_short_circuits_to_success(self, tmp_path, requests_map):
        b = builder()
        final = b.tuned_source(6)
        store = CodeStore(tmp_path / "store")
        store.add_template(
            final, dict(b.ANALYZER_REPLY), b.partition_ranges(final)
        )
        runner = SessionRunner(
            make_config(tmp_path),
            fixture_backend("seeded_session.jsonl"),
            store=store,
        )
        state = runner.run(requests_map["seeded"])
        assert state.status == SUCCEEDED
        assert len(state.history) == 1
        record = state.history.last()
        assert record.extras["template_id"] == content_hash(final)[:12]
        assert record.reward.total() == pytest.approx(96.0)


class TestCrashSession:
    def test_one_debug_round_inside_one_record(self, tmp_path, requests_map):
        runner = SessionRunner(
            make_config(tmp_path), fixture_backend("crash_session.jsonl")
        )
        state = runner.run(requests_map["crash"])
        assert state.status == SUCCEEDED
        assert len(state.history) == 1
        record = state.history.last()
        assert record.extras["debug_rounds"] == 1
        assert record.observation.exit_code == 0
        assert record.reward.total() >= 90.0
        events = read_events(state.project_dir / "events.jsonl")
        executions = [e for e in events if e.kind == "execution"]
        assert len(executions) == 2
        assert executions[0].payload["exit_code"] != 0
        assert executions[1].payload["exit_code"] == 0


class TestCapSession:
    def test_exhaustion_zeroes_integrity(self, tmp_path, requests_map):
        runner = SessionRunner(
            make_config(tmp_path, max_iterations=1, max_debug_rounds=1),
            fixture_backend("cap_session.jsonl"),
        )
        state = runner.run(requests_map["cap"])
        assert state.status == EXHAUSTED
        record = state.history.last()
        assert record.reward.integrity == 0.0
        assert record.observation.exit_code != 0
        assert record.extras["debug_rounds"] == 1
        events = read_events(state.project_dir / "events.jsonl")
        assert events[-1].payload["status"] == EXHAUSTED


class TestMultistepSession:
    def test_two_steps_thread_artifacts_and_store(self, tmp_path, requests_map):
        runner = SessionRunner(
            make_config(tmp_path), fixture_backend("multistep_session.jsonl")
        )
        state = runner.run(requests_map["multistep"])
        assert state.status == SUCCEEDED
        assert len(state.routing.steps) == 2
        assert len(state.history) == 2
        steps = [r.extras["step_index"] for r in state.history.records]
        assert steps == [0, 1]
        # both steps converge on the same final script, so step 1's deposit
        # dedups onto step 0's content hash
        assert len(runner.store.templates) == 1
        (template_id,) = runner.store.templates
        assert state.history.records[1].extras["template_id"] == template_id[:12]


class TestInteractiveSession:
    def test_gates_block_and_directive_binds_next_iteration(
        self, tmp_path, requests_map
    ):
        runner = SessionRunner(
            make_config(tmp_path, mode="interactive", gate_timeout_seconds=30.0),
            fixture_backend("interactive_session.jsonl"),
        )
        result = {}

        def drive():
            result["state"] = runner.run(requests_map["interactive"])

        thread = threading.Thread(target=drive)
        thread.start()
        sent = False
        for _ in range(2000):
            gate = runner.gates.waiting_gate
            if gate is not None:
                if not sent and gate == "post_advisor":
                    runner.inject_directive(gate, "jump straight to degree 6")
                    sent = True
                else:
                    runner.inject_directive(gate)
            if result.get("state") is not None:
                break
            time.sleep(0.005)
        thread.join(timeout=30)
        assert not thread.is_alive()
        state = result["state"]
        assert state.status == SUCCEEDED
        assert state.history.rewards() == pytest.approx([62.0, 96.0])
        assert state.history.records[1].extras["directives"] == [
            "jump straight to degree 6"
        ]
        events = read_events(state.project_dir / "events.jsonl")
        gates = [e.payload["gate"] for e in events if e.kind == "gate_waiting"]
        assert gates == [
            "pre_strategy_commit",
            "post_advisor",
            "pre_strategy_commit",
            "post_advisor",
        ]


class TestReplayErrors:
    def test_missing_meta(self, tmp_path):
        with pytest.raises(OrchestratorError, match="session.json"):
            replay_session(tmp_path)

    def test_truncated_event_log_rejected(self, main_run, tmp_path):
        _, state = main_run
        clone = tmp_path / "clone"
        clone.mkdir()
        for name in ("session.json", "trials.jsonl"):
            (clone / name).write_bytes((state.project_dir / name).read_bytes())
        lines = (
            (state.project_dir / "events.jsonl").read_text().strip().splitlines()
        )
        (clone / "events.jsonl").write_text(
            "".join(line + "\n" for line in lines[:-1])
        )
        with pytest.raises(OrchestratorError, match="terminal"):
            replay_session(clone)

    def test_iteration_count_mismatch_rejected(self, main_run, tmp_path):
        _, state = main_run
        clone = tmp_path / "clone"
        clone.mkdir()
        for name in ("session.json", "events.jsonl"):
            (clone / name).write_bytes((state.project_dir / name).read_bytes())
        lines = (
            (state.project_dir / "trials.jsonl").read_text().strip().splitlines()
        )
        (clone / "trials.jsonl").write_text(
            "".join(line + "\n" for line in lines[:-1])
        )
        with pytest.raises(OrchestratorError, match="iterations"):
            replay_session(clone)


class TestTransitions:
    def state(self):
        return SessionState(
            session_id="s1",
            problem=FormalProblem(title="t", pde_or_task="task"),
            routing=None,
            history=None,
        )

    def test_running_reaches_every_terminal(self):
        for target in TERMINAL_STATUSES:
            state = self.state()
            transition(state, target)
            assert state.status == target

    def test_terminal_states_are_absorbing(self):
        state = self.state()
        transition(state, SUCCEEDED)
        with pytest.raises(StateTransitionError):
            transition(state, RUNNING)

    def test_waiting_can_resume(self):
        state = self.state()
        transition(state, "waiting_intervention")
        transition(state, RUNNING)
        assert state.status == RUNNING


class TestGateController:
    def test_autonomous_wait_never_blocks(self):
        gates = GateController("autonomous", timeout_seconds=100.0)
        started = time.monotonic()
        outcome = gates.wait("pre_strategy_commit")
        assert time.monotonic() - started < 1.0
        assert not outcome.auto_approved
        assert not outcome.aborted

    def test_autonomous_resolve_queues_directive(self):
        gates = GateController("autonomous", timeout_seconds=1.0)
        reply = gates.resolve("post_advisor", "try weak form")
        assert reply == {"gate": "post_advisor", "accepted": True, "queued": True}
        assert gates.drain_directives() == ("try weak form",)
        assert gates.drain_directives() == ()

    def test_interactive_mismatch_raises(self):
        gates = GateController("interactive", timeout_seconds=1.0)
        with pytest.raises(GateMismatchError):
            gates.resolve("post_advisor")

    def test_unknown_gate_rejected(self):
        gates = GateController("interactive", timeout_seconds=1.0)
        with pytest.raises(ValueError, match="valid gates"):
            gates.resolve("coffee_break")
        assert "abort" in GATE_IDS

    def test_interactive_resolve_wakes_waiter(self):
        gates = GateController("interactive", timeout_seconds=30.0)
        outcomes = []

        def wait():
            outcomes.append(gates.wait("pre_strategy_commit"))

        thread = threading.Thread(target=wait)
        thread.start()
        for _ in range(1000):
            if gates.waiting_gate == "pre_strategy_commit":
                break
            time.sleep(0.002)
        gates.resolve("pre_strategy_commit", "hold the line")
        thread.join(timeout=5)
        assert not thread.is_alive()
        assert outcomes[0].auto_approved is False
        assert gates.drain_directives() == ("hold the line",)

    def test_interactive_timeout_auto_approves(self):
        gates = GateController("interactive", timeout_seconds=0.05)
        outcome = gates.wait("post_advisor")
        assert outcome.auto_approved

    def test_abort_wins_everywhere(self):
        gates = GateController("interactive", timeout_seconds=30.0)
        gates.resolve("abort")
        assert gates.aborted
        outcome = gates.wait("pre_strategy_commit")
        assert outcome.aborted


class TestSmallPieces:
    def test_logical_clock_ticks(self):
        clock = LogicalClock()
        assert [clock.now(), clock.now(), clock.now()] == [1.0, 2.0, 3.0]

    def test_make_clock(self):
        assert isinstance(make_clock("logical"), LogicalClock)
        assert isinstance(make_clock("wall"), WallClock)

    def test_render_problem_includes_conditional_sections(self):
        problem = FormalProblem(
            title="Cosine surrogate",
            pde_or_task="approximate u(x)",
            boundary_conditions="u(0) = 1",
            outputs_required=("summary_all.png",),
        )
        text = render_problem(problem)
        assert "TITLE: Cosine surrogate" in text
        assert "BOUNDARY CONDITIONS: u(0) = 1" in text
        assert "REQUIRED OUTPUTS: summary_all.png" in text
        assert "INITIAL CONDITIONS" not in text

    def test_max_backend_calls_scales_with_iterations(self, config_factory):
        small = config_factory(max_iterations=1)
        large = config_factory(max_iterations=10)
        assert 0 < max_backend_calls(small) < max_backend_calls(large)
