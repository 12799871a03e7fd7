import importlib.util
import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).resolve().parent / "fixtures"

_builder = None


def builder():
    """The fixture-authoring module, loaded once per test session."""
    global _builder
    if _builder is None:
        spec = importlib.util.spec_from_file_location(
            "fixture_builder", FIXTURES / "build_transcripts.py"
        )
        module = importlib.util.module_from_spec(spec)
        assert spec.loader is not None
        spec.loader.exec_module(module)
        _builder = module
    return _builder


def fixture_backend(name: str):
    from labloop.backend import load_fixture

    return load_fixture(FIXTURES / name)


def make_config(workdir: Path, **overrides):
    from labloop.config import SessionConfig
    from labloop.sandbox import RuntimeConfig

    runtime = overrides.pop(
        "runtime", RuntimeConfig(workdir_root=workdir, timeout_seconds=60.0)
    )
    overrides.setdefault("clock", "logical")
    return SessionConfig(runtime=runtime, **overrides)


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def requests_map() -> dict:
    return json.loads((FIXTURES / "requests.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def seed_source() -> str:
    return builder().seed_source()


@pytest.fixture
def backend_factory():
    return fixture_backend


@pytest.fixture
def config_factory(tmp_path):
    def make(**overrides):
        return make_config(tmp_path, **overrides)

    return make


@pytest.fixture(scope="session")
def main_run(tmp_path_factory, requests_map):
    """One shared autonomous run of the main fixture; treat as read-only."""
    from labloop.orchestrator import SessionRunner

    workdir = tmp_path_factory.mktemp("main-session")
    runner = SessionRunner(
        make_config(workdir), fixture_backend("main_session.jsonl")
    )
    state = runner.run(requests_map["main"])
    return runner, state
