"""Command-line entry points: run a session, replay or summarize a log, serve."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .backend import HttpBackend, load_fixture
from .config import ConfigError, SessionConfig, load_config
from .orchestrator import SessionRunner
from .triallog import TrialLogError, replay, report

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EXHAUSTED = 2
EXIT_ABORTED = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labloop", description="autonomous research loop"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one session from a request file")
    run.add_argument("request_file", type=Path)
    run.add_argument("--interactive", action="store_true")
    run.add_argument("--config", type=Path, default=None)
    run.add_argument("--fixture", type=Path, default=None,
                     help="JSONL transcript; replaces the live backend")
    run.add_argument("--workdir", type=Path, default=None)

    rep = sub.add_parser("replay", help="print the trials in a JSONL log")
    rep.add_argument("log", type=Path)

    reg = sub.add_parser("regret", help="reward/regret summary for a JSONL log")
    reg.add_argument("log", type=Path)

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--config", type=Path, default=None)
    serve.add_argument("--fixture", type=Path, default=None)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8321)
    return parser


def _load_session_config(args: argparse.Namespace) -> SessionConfig:
    config = load_config(args.config) if args.config else SessionConfig()
    if getattr(args, "interactive", False):
        config = replace(config, mode="interactive")
    if getattr(args, "workdir", None):
        config = replace(config, runtime=replace(config.runtime, workdir_root=args.workdir))
    fixture = getattr(args, "fixture", None)
    if fixture:
        config = replace(config, fixture_path=str(fixture))
    return config


def _make_backend(config: SessionConfig):
    if config.fixture_path:
        return load_fixture(config.fixture_path)
    if not config.providers or not config.roles:
        raise ConfigError(
            "live runs need a backends: section (providers and roles) in the "
            "config file, or --fixture for offline replay"
        )
    # A role named "default" becomes the fallback for anything unmapped.
    return HttpBackend(
        config.providers, config.roles, default_role=config.roles.get("default")
    )


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        config = _load_session_config(args)
        backend = _make_backend(config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    request_text = args.request_file.read_text(encoding="utf-8")
    runner = SessionRunner(config, backend)
    state = runner.run(request_text)
    print(f"session {state.session_id}: {state.status}")
    for record in state.history.records:
        arm = "/".join(record.action.arm())
        print(
            f"  iter {record.iteration}: arm={arm} "
            f"reward={record.reward.total():.1f} "
            f"decision={record.diagnosis.get('continue_or_stop', '?')}"
        )
    if state.project_dir is not None:
        print(f"  project dir: {state.project_dir}")
    return {
        "succeeded": EXIT_OK,
        "exhausted": EXIT_EXHAUSTED,
        "aborted": EXIT_ABORTED,
    }.get(state.status, EXIT_ERROR)


def _cmd_replay(args: argparse.Namespace) -> int:
    try:
        history = replay(args.log)
    except TrialLogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"session {history.session_id}: {len(history)} trials")
    for record in history.records:
        arm = "/".join(record.action.arm())
        print(
            f"  iter {record.iteration}: arm={arm} "
            f"reward={record.reward.total():.1f} "
            f"exit_code={record.observation.exit_code}"
        )
    return EXIT_OK


def _cmd_regret(args: argparse.Namespace) -> int:
    try:
        summary = report(args.log)
    except TrialLogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    nonneg = sum(1 for d in summary.deltas if d >= 0)
    print(f"session {summary.session_id}")
    print(f"  rewards: {[round(r, 2) for r in summary.rewards]}")
    print(f"  best: {summary.best_reward:.1f} (iteration {summary.best_iteration})")
    print(f"  regret vs r*={summary.r_star_default:.0f}: {summary.regret_vs_default:.1f}")
    print(f"  regret vs best observed: {summary.regret_vs_best:.1f}")
    if summary.deltas:
        print(f"  non-negative reward deltas: {nonneg}/{len(summary.deltas)}")
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .api import SessionManager, create_app

    try:
        config = _load_session_config(args)
        if config.fixture_path:
            def backend_factory(cfg: SessionConfig):
                return load_fixture(cfg.fixture_path)
        else:
            def backend_factory(cfg: SessionConfig):
                return _make_backend(cfg)
            _make_backend(config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    manager = SessionManager(config, backend_factory)
    app = create_app(manager)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "run": _cmd_run,
        "replay": _cmd_replay,
        "regret": _cmd_regret,
        "serve": _cmd_serve,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
