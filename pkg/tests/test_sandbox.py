"""Subprocess execution, artifact collection, and crash triage."""

import hashlib
import json

import pytest

from labloop.backend import BackendError, MissingFixtureError, MockBackend
from labloop.cells import parse_cells
from labloop.intake import FormalProblem
from labloop.sandbox import (
    ArtifactEntry,
    ArtifactManifest,
    ContainmentError,
    DebugReport,
    ExecutionOutcome,
    RuntimeConfig,
    SandboxError,
    assign_project_name,
    collect_artifacts,
    debug_report,
    execute,
    log_excerpt,
    metrics_are_finite,
    next_version,
    relative_to_project,
    slugify,
    sorted_artifact_names,
    traceback_cells,
    write_code_state,
)


class _DownBackend(MockBackend):
    def complete(self, request):
        raise BackendError("offline")


def problem():
    return FormalProblem(
        title="Cosine surrogate", pde_or_task="approximate u(x) on [0, 1]"
    )


def run_script(tmp_path, body, timeout=30.0):
    runtime = RuntimeConfig(workdir_root=tmp_path, timeout_seconds=timeout)
    iteration_dir = tmp_path / "proj" / "v001"
    iteration_dir.mkdir(parents=True)
    write_code_state(iteration_dir, runtime, body)
    return execute(iteration_dir, runtime)


class TestSlugify:
    def test_lowercases_and_joins(self):
        assert slugify("Kelvin-Helmholtz Shear Layer!") == "kelvin_helmholtz_shear_layer"

    def test_collapses_runs_and_strips_edges(self):
        assert slugify("  --weird--  name--") == "weird_name"

    def test_preserves_existing_underscores(self):
        assert slugify("poly_fit_v2") == "poly_fit_v2"


class TestRuntimeConfig:
    def test_rejects_nonpositive_timeout(self, tmp_path):
        with pytest.raises(ValueError, match="timeout"):
            RuntimeConfig(workdir_root=tmp_path, timeout_seconds=0)

    def test_rejects_empty_interpreter(self, tmp_path):
        with pytest.raises(ValueError, match="interpreter"):
            RuntimeConfig(workdir_root=tmp_path, interpreter_command=())


class TestAssignProjectName:
    def test_uses_filing_reply(self, tmp_path):
        backend = MockBackend({("filing", 1): json.dumps({"name": "Poly Fit"})})
        project = assign_project_name(problem(), backend, tmp_path)
        assert project == tmp_path / "poly_fit"
        assert project.is_dir()

    def test_collision_appends_counter(self, tmp_path):
        (tmp_path / "poly_fit").mkdir()
        backend = MockBackend({("filing", 1): json.dumps({"name": "poly fit"})})
        project = assign_project_name(problem(), backend, tmp_path)
        assert project.name == "poly_fit_2"

    def test_backend_failure_falls_back_to_digest_name(self, tmp_path):
        project = assign_project_name(problem(), _DownBackend({}), tmp_path)
        assert project.name.startswith("prob_")
        assert len(project.name) == len("prob_") + 8

    def test_missing_fixture_is_a_hard_error(self, tmp_path):
        with pytest.raises(MissingFixtureError):
            assign_project_name(problem(), MockBackend({}), tmp_path)


class TestNextVersion:
    def test_first_version_is_v001(self, tmp_path):
        assert next_version(tmp_path).name == "v001"

    def test_max_rule_not_count(self, tmp_path):
        (tmp_path / "v001").mkdir()
        (tmp_path / "v007").mkdir()
        (tmp_path / "notes").mkdir()
        assert next_version(tmp_path).name == "v008"

    def test_missing_project_dir(self, tmp_path):
        with pytest.raises(SandboxError, match="does not exist"):
            next_version(tmp_path / "nope")


class TestExecute:
    def test_success_with_metrics(self, tmp_path):
        outcome = run_script(
            tmp_path,
            "import json\n"
            "print('solving')\n"
            "with open('metrics.json', 'w') as fh:\n"
            "    json.dump({'rel_l2': 0.05, 'loss': 1.5}, fh)\n",
        )
        assert outcome.exit_code == 0
        assert not outcome.timed_out
        assert outcome.metrics == {"rel_l2": 0.05, "loss": 1.5}
        assert "solving" in outcome.stdout_path.read_text()

    def test_nonzero_exit_does_not_raise(self, tmp_path):
        outcome = run_script(tmp_path, "import sys\nsys.exit(3)\n")
        assert outcome.exit_code == 3

    def test_timeout_kills_the_run(self, tmp_path):
        outcome = run_script(
            tmp_path, "import time\ntime.sleep(30)\n", timeout=0.5
        )
        assert outcome.timed_out
        assert outcome.duration_seconds < 10

    def test_malformed_metrics_ignored(self, tmp_path):
        outcome = run_script(
            tmp_path,
            "with open('metrics.json', 'w') as fh:\n"
            "    fh.write('not json at all')\n",
        )
        assert outcome.exit_code == 0
        assert outcome.metrics == {}

    def test_nonfinite_and_nonnumeric_metrics_dropped(self, tmp_path):
        outcome = run_script(
            tmp_path,
            "with open('metrics.json', 'w') as fh:\n"
            "    fh.write('{\"a\": NaN, \"b\": \"x\", \"c\": true, \"d\": 2.0}')\n",
        )
        assert outcome.metrics == {"d": 2.0}

    def test_env_is_allowlisted(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SECRET_TOKEN", "sk-test-secret")
        outcome = run_script(
            tmp_path,
            "import os\n"
            "print('SECRET_TOKEN' in os.environ, 'PATH' in os.environ)\n",
        )
        assert "False True" in outcome.stdout_path.read_text()

    def test_escaping_iteration_dir_is_contained(self, tmp_path):
        runtime = RuntimeConfig(workdir_root=tmp_path / "root")
        (tmp_path / "root").mkdir()
        outside = tmp_path / "elsewhere"
        outside.mkdir()
        with pytest.raises(ContainmentError):
            execute(outside, runtime)

    def test_missing_main_file(self, tmp_path):
        runtime = RuntimeConfig(workdir_root=tmp_path)
        inner = tmp_path / "v001"
        inner.mkdir()
        with pytest.raises(SandboxError, match="not written"):
            execute(inner, runtime)


class TestCollectArtifacts:
    def test_sorted_entries_and_missing_patterns(self, tmp_path):
        (tmp_path / "b.csv").write_bytes(b"step,residual\n")
        (tmp_path / "a.png").write_bytes(b"\x89PNG\r\n")
        manifest = collect_artifacts(tmp_path, ("*.png", "*.csv", "*.npz"))
        assert manifest.names() == ["a.png", "b.csv"]
        assert manifest.missing == ("*.npz",)
        png = manifest.entries[0]
        assert png.size == 6
        assert png.sha256 == hashlib.sha256(b"\x89PNG\r\n").hexdigest()

    def test_overlapping_patterns_do_not_duplicate(self, tmp_path):
        (tmp_path / "a.png").write_bytes(b"x")
        manifest = collect_artifacts(tmp_path, ("*.png", "a.*"))
        assert manifest.names() == ["a.png"]

    def test_directories_are_skipped(self, tmp_path):
        (tmp_path / "fake.png").mkdir()
        manifest = collect_artifacts(tmp_path, ("*.png",))
        assert manifest.entries == ()
        # the pattern did match, so it is not reported missing
        assert manifest.missing == ()

    def test_sorted_artifact_names_helper(self):
        manifest = ArtifactManifest(
            entries=(
                ArtifactEntry("z.png", 1, "0" * 64),
                ArtifactEntry("a.csv", 1, "0" * 64),
            ),
            missing=(),
        )
        assert sorted_artifact_names(manifest) == ["a.csv", "z.png"]


SCRIPT = """# %% [config]
degree = 0

# %% [solve]
value = undefined_name
"""


def outcome_with_stderr(tmp_path, stderr_text, exit_code=1, timed_out=False):
    stdout = tmp_path / "stdout.log"
    stderr = tmp_path / "stderr.log"
    stdout.write_text("")
    stderr.write_text(stderr_text)
    return ExecutionOutcome(
        exit_code=exit_code,
        stdout_path=stdout,
        stderr_path=stderr,
        duration_seconds=0.1,
        timed_out=timed_out,
    )


class TestLogExcerpt:
    def test_joins_stdout_and_stderr(self, tmp_path):
        outcome = outcome_with_stderr(tmp_path, "Traceback ...")
        outcome.stdout_path.write_text("progress line\n")
        text = log_excerpt(outcome)
        assert text.startswith("progress line")
        assert "STDERR:\nTraceback ..." in text

    def test_limit_keeps_the_tail(self, tmp_path):
        outcome = outcome_with_stderr(tmp_path, "")
        outcome.stdout_path.write_text("x" * 500 + "THE END")
        text = log_excerpt(outcome, limit=20)
        assert text.endswith("THE END")
        assert len(text) <= 20


class TestTracebackCells:
    def test_maps_main_file_lines_to_cells(self):
        script = parse_cells(SCRIPT)
        stderr = (
            '  File "main.py", line 5, in <module>\n'
            "    value = undefined_name\n"
            "NameError: name 'undefined_name' is not defined\n"
        )
        assert traceback_cells(stderr, script, "main.py") == [1]

    def test_other_files_ignored(self):
        script = parse_cells(SCRIPT)
        stderr = '  File "helper.py", line 2, in fit\n'
        assert traceback_cells(stderr, script, "main.py") == []

    def test_duplicates_collapse(self):
        script = parse_cells(SCRIPT)
        stderr = (
            '  File "main.py", line 5, in <module>\n'
            '  File "main.py", line 5, in <module>\n'
            '  File "main.py", line 2, in <module>\n'
        )
        assert traceback_cells(stderr, script, "main.py") == [1, 0]


class TestDebugReport:
    def test_requires_a_failure(self, tmp_path):
        outcome = outcome_with_stderr(tmp_path, "", exit_code=0)
        with pytest.raises(SandboxError, match="failed outcome"):
            debug_report(outcome, parse_cells(SCRIPT), MockBackend({}))

    def test_timeout_short_circuits_without_backend(self, tmp_path):
        outcome = outcome_with_stderr(tmp_path, "", exit_code=0, timed_out=True)
        backend = MockBackend({})
        report = debug_report(outcome, parse_cells(SCRIPT), backend)
        assert report.error_class == "timeout"
        assert backend.total_calls == 0

    def test_merges_traceback_and_reply_suspects(self, tmp_path):
        stderr = '  File "main.py", line 5, in <module>\nNameError: nope\n'
        outcome = outcome_with_stderr(tmp_path, stderr)
        backend = MockBackend(
            {
                ("debugger", 1): json.dumps(
                    {
                        "error_class": "NameError",
                        "suspect_cells": [0, 1, 9],
                        "fix_directive": "define the name in config",
                    }
                )
            }
        )
        report = debug_report(outcome, parse_cells(SCRIPT), backend)
        assert report.error_class == "NameError"
        assert report.suspect_cells == (1, 0)
        assert report.fix_directive == "define the name in config"

    def test_backend_failure_degrades_to_unclassified(self, tmp_path):
        stderr = '  File "main.py", line 5, in <module>\nNameError: nope\n'
        outcome = outcome_with_stderr(tmp_path, stderr)
        report = debug_report(outcome, parse_cells(SCRIPT), _DownBackend({}))
        assert report.error_class == "unclassified"
        assert report.suspect_cells == (1,)
        assert "NameError: nope" in report.fix_directive

    def test_missing_fixture_propagates(self, tmp_path):
        outcome = outcome_with_stderr(tmp_path, "boom")
        with pytest.raises(MissingFixtureError):
            debug_report(outcome, parse_cells(SCRIPT), MockBackend({}))

    def test_report_requires_directive(self):
        with pytest.raises(ValueError, match="fix_directive"):
            DebugReport(error_class="x", suspect_cells=(), fix_directive="")


class TestSmallHelpers:
    def test_relative_to_project(self, tmp_path):
        inner = tmp_path / "v001" / "plot.png"
        inner.parent.mkdir()
        inner.write_bytes(b"x")
        assert relative_to_project(inner, tmp_path) == "v001/plot.png"

    def test_metrics_are_finite(self):
        assert metrics_are_finite({"a": 1.0, "b": 2})
        assert not metrics_are_finite({"a": float("nan")})
        assert not metrics_are_finite({"a": float("inf")})
        assert not metrics_are_finite({"a": True})
        assert not metrics_are_finite({"a": "high"})
