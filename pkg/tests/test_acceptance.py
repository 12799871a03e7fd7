"""Release gate: one test per shipped promise, each at its promised scale.

Run with -v to get a single pass/fail line per criterion. Every numeric
check sits next to an independently coded oracle rather than a value read
back from the engine.
"""

import json
import math
import random
import time
from pathlib import Path

import pytest

from labloop.backend import MockBackend
from labloop.bandit import ActionSpace
from labloop.cells import (
    CellPatch,
    PatchOp,
    apply_patch,
    parse_cells,
    parse_patch,
    render_cells,
)
from labloop.intake import formalize_request, route
from labloop.orchestrator import SessionRunner, replay_session
from labloop.rewards import (
    AdvisorGrades,
    ScoringConfig,
    compose_reward,
    precision_credit,
    score_accuracy,
    score_integrity,
)
from labloop.sandbox import ArtifactEntry, ArtifactManifest, ExecutionOutcome
from labloop.store import CodeStore, ModuleRecord, collect_modules, reassemble, split_script
from labloop.synthbandit import compare_policies

from conftest import fixture_backend, make_config


def run_fixture(workdir: Path, fixture_name: str, request_text: str, **cfg):
    runner = SessionRunner(make_config(workdir, **cfg), fixture_backend(fixture_name))
    state = runner.run(request_text)
    return runner, state


@pytest.fixture(scope="module")
def acceptance_runs(tmp_path_factory, requests_map):
    """The three scripted end-to-end runs reused by later criteria."""
    root = tmp_path_factory.mktemp("acceptance")
    return {
        "main": run_fixture(root / "main", "main_session.jsonl", requests_map["main"]),
        "crash": run_fixture(
            root / "crash", "crash_session.jsonl", requests_map["crash"]
        ),
        "cap": run_fixture(
            root / "cap",
            "cap_session.jsonl",
            requests_map["cap"],
            max_iterations=1,
            max_debug_rounds=1,
        ),
    }


def test_criterion_1_end_to_end_session_is_deterministic(tmp_path, requests_map):
    started = time.monotonic()
    _, first = run_fixture(tmp_path / "a", "main_session.jsonl", requests_map["main"])
    _, second = run_fixture(tmp_path / "b", "main_session.jsonl", requests_map["main"])
    elapsed = time.monotonic() - started

    assert first.status == "succeeded"
    assert len(first.history.records) == 3
    assert first.history.rewards() == pytest.approx([62.0, 81.0, 96.0], abs=1e-9)

    for log in ("trials.jsonl", "events.jsonl"):
        blob_a = (first.project_dir / log).read_bytes()
        blob_b = (second.project_dir / log).read_bytes()
        assert blob_a == blob_b, f"{log} differs between consecutive runs"

    assert elapsed < 10.0, f"two runs took {elapsed:.2f}s"


LINE_POOL = [
    "",
    "x = 1",
    "# plain comment",
    "    indented()",
    "print('λ §')",
    "# %% [config]",
    "# %% [solve]",
    "# %%",
    "# %% []",
    "\tweird = '\ttab'",
    "#%% close but no marker",
]

LINE_ALPHABET = "ab #%[]{}()\t'\"λΔ0129_=."


def random_line(rng: random.Random) -> str:
    if rng.random() < 0.5:
        return rng.choice(LINE_POOL)
    return "".join(
        rng.choice(LINE_ALPHABET) for _ in range(rng.randint(0, 30))
    )


def random_body(rng: random.Random, low: int, high: int) -> list[str]:
    lines = []
    for _ in range(rng.randint(low, high)):
        line = random_line(rng)
        while line.startswith("# %%"):
            line = random_line(rng)
        lines.append(line)
    return lines


def disjoint_random_ops(rng: random.Random, body_len: int) -> list[PatchOp]:
    """Non-overlapping splices so an order-free oracle is well defined."""
    ops: list[PatchOp] = []
    pos = 0
    while pos <= body_len and len(ops) < 4 and rng.random() < 0.8:
        kind = rng.choice(("replace", "delete", "insert"))
        if kind == "insert":
            at = rng.randint(pos, body_len)
            ops.append(
                PatchOp(op="insert", start_line=at, lines=tuple(random_body(rng, 0, 3)))
            )
            pos = at + 1
        else:
            if pos >= body_len:
                break
            start = rng.randint(pos, body_len - 1)
            end = min(body_len - 1, start + rng.randint(0, 3))
            if kind == "replace":
                ops.append(
                    PatchOp(
                        op="replace",
                        start_line=start,
                        end_line=end,
                        lines=tuple(random_body(rng, 0, 3)),
                    )
                )
            else:
                ops.append(PatchOp(op="delete", start_line=start, end_line=end))
            pos = end + 2
    rng.shuffle(ops)
    return ops


def splice_oracle(body: list[str], ops: list[PatchOp]) -> list[str]:
    """Ascending single sweep; deliberately not the engine's algorithm."""
    out: list[str] = []
    cursor = 0
    for op in sorted(ops, key=lambda op: op.start_line):
        out.extend(body[cursor : op.start_line])
        if op.op == "insert":
            out.extend(op.lines)
            cursor = op.start_line
        elif op.op == "replace":
            out.extend(op.lines)
            cursor = op.end_line + 1
        else:
            cursor = op.end_line + 1
    out.extend(body[cursor:])
    return out


def test_criterion_2_patch_engine_identity_and_splice_oracle():
    rng = random.Random(20260817)
    started = time.monotonic()

    for _ in range(10_000):
        text = "\n".join(random_line(rng) for _ in range(rng.randint(0, 12)))
        assert render_cells(parse_cells(text)) == text

    for _ in range(1_000):
        lines: list[str] = random_body(rng, 0, 3)
        for c in range(rng.randint(1, 3)):
            lines.append(f"# %% [part{c}]")
            lines.extend(random_body(rng, 0, 10))
        text = "\n".join(lines)
        script = parse_cells(text)

        idx = rng.randrange(len(script.cells))
        body = list(script.cells[idx].lines)
        ops = disjoint_random_ops(rng, len(body))
        patch = CellPatch(cell_index=idx, ops=tuple(ops))
        assert parse_patch(patch.to_json()) == patch

        patched = apply_patch(script, patch)
        assert list(patched.cells[idx].lines) == splice_oracle(body, ops)
        assert patched.preamble == script.preamble
        for other in range(len(script.cells)):
            if other != idx:
                assert patched.cells[other] == script.cells[other]
        assert render_cells(script) == text, "apply_patch mutated its input"

        empty = CellPatch(cell_index=idx, ops=())
        assert render_cells(apply_patch(script, empty)) == text

    assert time.monotonic() - started < 30.0


def _outcome(exit_code: int, timed_out: bool) -> ExecutionOutcome:
    return ExecutionOutcome(
        exit_code=exit_code,
        stdout_path=Path("stdout.log"),
        stderr_path=Path("stderr.log"),
        duration_seconds=0.1,
        timed_out=timed_out,
        metrics={},
    )


def _manifest(names: list[str]) -> ArtifactManifest:
    return ArtifactManifest(
        entries=tuple(ArtifactEntry(name=n, size=1, sha256="0" * 64) for n in names),
        missing=(),
    )


def test_criterion_3_reward_engine_caps_ramp_and_reference_metrics():
    rng = random.Random(31415)
    cfg = ScoringConfig()

    for _ in range(10_000):
        required = tuple(f"a{i}.png" for i in range(rng.randint(0, 4)))
        scoring = ScoringConfig(required_artifacts=required)
        outcome = _outcome(rng.choice((0, 0, 0, 1, 3, -9)), rng.random() < 0.1)
        names = [f"a{i}.png" for i in range(rng.randint(0, 5))]
        integrity = score_integrity(outcome, _manifest(names), scoring)

        if rng.random() < 0.85:
            metrics = {"rel_l2": 10.0 ** rng.uniform(-9.0, 2.0)}
        elif rng.random() < 0.5:
            metrics = {"rel_l2": rng.choice((0.0, math.inf, math.nan, -1.0))}
        else:
            metrics = {}
        grades = AdvisorGrades(
            details_grade=rng.uniform(0.0, 15.0),
            optimality_grade=rng.uniform(0.0, 15.0),
            consistency_grade=rng.uniform(0.0, 1.0),
        )
        accuracy = score_accuracy(metrics, grades, scoring)
        breakdown = compose_reward(integrity, accuracy, grades)

        assert 0.0 <= breakdown.integrity <= 35.0
        assert 0.0 <= breakdown.accuracy <= 35.0 + 1e-12
        assert 0.0 <= breakdown.details <= 15.0
        assert 0.0 <= breakdown.optimality <= 15.0
        assert 0.0 <= breakdown.total() <= 100.0 + 1e-9

    # at or below the dimensional threshold, full credit is exact, not approximate
    assert precision_credit(cfg.epsilon, cfg) == cfg.precision_cap
    for _ in range(2_000):
        err = rng.uniform(0.0, 1.0) * cfg.epsilon
        assert precision_credit(err, cfg) == cfg.precision_cap

    for err in (1.94e-6, 5.34e-9, 2.22e-8, 2.21e-6):
        assert precision_credit(err, cfg) == cfg.precision_cap
        scored = score_accuracy(
            {"rel_l2": err},
            AdvisorGrades(details_grade=0.0, optimality_grade=0.0, consistency_grade=1.0),
            cfg,
        )
        assert scored.precision_sub == cfg.precision_cap


def test_criterion_4_learning_policy_beats_uniform_play():
    space = ActionSpace(
        rep_options=("mlp", "fourier", "polynomials"),
        constraint_options=("strong_form", "weak_form"),
        opt_options=("adam", "lbfgs"),
    )
    assert len(space.combos()) == 12

    summary = compare_policies(space, num_steps=200, seeds=range(100))
    assert (
        summary.greedy_mean_cumulative_regret
        < summary.uniform_mean_cumulative_regret
    ), summary
    assert summary.fraction_nonnegative_deltas >= 0.90, summary


def test_criterion_5_store_round_trip_partitions_and_dependencies(tmp_path):
    rng = random.Random(55)
    store = CodeStore(tmp_path / "store")

    # 100 random templates survive deposit -> reload byte-identically
    distinctive = (
        "def chebyshev_projection(nodes, weights):\n"
        "    return quadrature_lobatto(nodes, weights)"
    )
    originals = {store.add_template(distinctive, {"method": "spectral"}, [(1, 2)]).id: distinctive}
    for i in range(99):
        lines = []
        for j in range(rng.randint(1, 40)):
            if j % 3 == 0:
                lines.append(f"def fn_{i}_{j}(x):")
            else:
                lines.append(f"    y{j} = x * {rng.randint(1, 99)}")
        source = "\n".join(lines) + ("\n" if rng.random() < 0.5 else "")
        n = len(source.split("\n"))
        k = min(rng.randint(0, 3), n - 1)
        cuts = sorted(rng.sample(range(2, n + 1), k=k))
        ranges = list(zip([1] + cuts, [c - 1 for c in cuts] + [n]))
        record = store.add_template(source, {"method": f"m{i}"}, ranges)
        originals[record.id] = source
    assert len(originals) == 100

    reloaded = CodeStore(tmp_path / "store")
    for template_id, source in originals.items():
        assert reloaded.templates[template_id].source_text == source
        assert reassemble(reloaded.chunks[template_id]) == source

    from labloop.store import index_store, retrieve_template

    hit = retrieve_template(distinctive, index_store(reloaded, MockBackend(None)))
    assert hit.source_text == distinctive

    # splitter proposals, however sloppy, always become exact partitions
    for _ in range(300):
        n = rng.randint(1, 160)
        source = "\n".join(f"line_{k} = {k}" for k in range(n))
        proposal = [
            {"start_line": rng.randint(-3, n + 4), "end_line": rng.randint(-3, n + 4)}
            for _ in range(rng.randint(1, 6))
        ]
        backend = MockBackend({("splitter", 1): json.dumps({"ranges": proposal})})
        ranges = split_script(source, backend)
        assert ranges[0][0] == 1 and ranges[-1][1] == n
        assert all(s <= e for s, e in ranges)
        for (_, e1), (s2, _) in zip(ranges, ranges[1:]):
            assert s2 == e1 + 1

    # dependency collection agrees with an independent reachability + order oracle
    for trial in range(500):
        m = rng.randint(1, 12)
        names = [f"mod{trial}_{i}" for i in range(m)]
        deps: dict[str, list[str]] = {name: [] for name in names}
        for j in range(m):
            for i in range(j):
                if rng.random() < 0.3:
                    deps[names[j]].append(names[i])
        for name in rng.sample(names, m):
            store.add_module(
                ModuleRecord(
                    id=name,
                    description=name,
                    source_text=f"# {name}",
                    dependencies=tuple(deps[name]),
                )
            )
        roots = rng.sample(names, rng.randint(1, m))
        collection = collect_modules(roots, store)
        assert collection.missing == ()

        reachable: set[str] = set()
        frontier = list(roots)
        while frontier:
            node = frontier.pop()
            if node in reachable:
                continue
            reachable.add(node)
            frontier.extend(deps[node])

        got = [module.id for module in collection.found]
        assert len(got) == len(set(got)), "duplicate module in collection"
        assert set(got) == reachable
        position = {name: k for k, name in enumerate(got)}
        for node in reachable:
            for dep in deps[node]:
                assert position[dep] < position[node], (node, dep, got)


def test_criterion_6_routing_of_the_four_benchmark_requests(requests_map):
    expected = {
        "routing_inviscid_burgers": ["scic"],
        "routing_kh": ["scic"],
        "routing_operator_burgers": ["sciml_operator"],
        "routing_aiv": ["scic", "sciml_piml", "scic"],
    }
    for name, groups in expected.items():
        backend = fixture_backend(f"{name}.jsonl")
        problem = formalize_request(requests_map[name], backend)
        decision = route(problem, backend)
        assert decision.groups() == groups, (name, decision.groups())
        if name == "routing_aiv":
            assert [step.consumes_step for step in decision.steps] == [None, 0, 1]


def test_criterion_7_debug_loop_single_round_and_cap_exhaustion(acceptance_runs):
    _, crash = acceptance_runs["crash"]
    assert crash.status == "succeeded"
    assert len(crash.history.records) == 1
    record = crash.history.records[0]
    assert record.extras["debug_rounds"] == 1
    assert record.observation.exit_code == 0

    _, cap = acceptance_runs["cap"]
    assert cap.status == "exhausted"
    assert cap.history.records[-1].observation.exit_code != 0
    assert cap.history.records[-1].reward.integrity == 0.0


def test_criterion_8_event_log_replay_and_gapless_reconnects(acceptance_runs):
    for name, (runner, state) in acceptance_runs.items():
        replayed = replay_session(state.project_dir)
        assert replayed.status == state.status, name
        assert replayed.session_id == state.session_id
        assert replayed.history.records == state.history.records, name
        seqs = [event.seq for event in replayed.events]
        assert seqs == list(range(1, len(seqs) + 1)), name
        assert replayed.events[-1].kind == "terminal"

    runner, state = acceptance_runs["main"]
    log = runner.events
    total = len(replay_session(state.project_dir).events)
    rng = random.Random(8)
    for _ in range(20):
        collected = []
        cursor = 1
        while True:
            batch = log.snapshot(cursor)
            if not batch:
                break
            take = rng.randint(1, len(batch))
            collected.extend(batch[:take])
            cursor = collected[-1].seq + 1
            if collected[-1].kind == "terminal":
                break
        assert [event.seq for event in collected] == list(range(1, total + 1))
