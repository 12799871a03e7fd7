"""Session configuration: defaults, YAML loading, strict validation.

Unknown keys are rejected by name at every level so a typo in a config file
surfaces as a clear error (and a 400 at the API boundary) instead of a
silently ignored setting.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .backend import ProviderConfig, RoleBinding
from .bandit import ActionSpace
from .rewards import ScoringConfig, ScoringConfigError
from .sandbox import RuntimeConfig


class ConfigError(ValueError):
    pass


DEFAULT_ACTION_SPACE = ActionSpace(
    rep_options=("mlp", "mlp_fourier", "kan_wavelet", "polynomials"),
    constraint_options=("strong_form", "weak_form"),
    opt_options=("adam", "ssbroyden"),
)

MODES = ("autonomous", "interactive")
CLOCKS = ("wall", "logical")


@dataclass(frozen=True)
class SessionConfig:
    """Everything one research session needs, with working defaults."""

    mode: str = "autonomous"
    max_iterations: int = 15
    max_debug_rounds: int = 5
    reward_stop_threshold: float = 90.0
    strategy_max_rounds: int = 3
    inspector_cap: int = 2
    context_budget_tokens: int = 4000
    recent_records_verbatim: int = 5
    gate_timeout_seconds: float = 86400.0
    clock: str = "wall"
    capacity: int = 4
    session_id: str = ""
    action_space: ActionSpace = DEFAULT_ACTION_SPACE
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    runtime: RuntimeConfig = field(
        default_factory=lambda: RuntimeConfig(workdir_root=Path("workdir"))
    )
    providers: dict[str, ProviderConfig] = field(default_factory=dict)
    roles: dict[str, RoleBinding] = field(default_factory=dict)
    fixture_path: str = ""

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clock not in CLOCKS:
            raise ConfigError(f"clock must be one of {CLOCKS}, got {self.clock!r}")
        for name in (
            "max_iterations",
            "max_debug_rounds",
            "strategy_max_rounds",
            "inspector_cap",
            "capacity",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.reward_stop_threshold <= 100.0:
            raise ConfigError("reward_stop_threshold must lie within [0, 100]")
        if self.context_budget_tokens < 1:
            raise ConfigError("context_budget_tokens must be >= 1")
        if self.recent_records_verbatim < 0:
            raise ConfigError("recent_records_verbatim must be >= 0")
        if self.gate_timeout_seconds <= 0:
            raise ConfigError("gate_timeout_seconds must be positive")


_SESSION_KEYS = {f.name for f in fields(SessionConfig)}
_SCALAR_KEYS = _SESSION_KEYS - {"action_space", "scoring", "runtime", "providers", "roles"}


def _require_mapping(value: Any, where: str) -> dict[str, Any]:
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(data: dict[str, Any], allowed: set[str], where: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


def _parse_action_space(data: Any) -> ActionSpace:
    data = _require_mapping(data, "action_space")
    allowed = {"rep_options", "constraint_options", "opt_options"}
    _reject_unknown(data, allowed, "action_space")
    merged = {**DEFAULT_ACTION_SPACE.to_dict(), **data}
    try:
        return ActionSpace.from_dict(merged)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"action_space: {exc}") from exc


def _parse_scoring(data: Any) -> ScoringConfig:
    data = _require_mapping(data, "scoring")
    allowed = {
        "epsilon",
        "precision_cap",
        "consistency_cap",
        "required_artifacts",
        "primary_metric",
    }
    _reject_unknown(data, allowed, "scoring")
    kwargs = dict(data)
    if "required_artifacts" in kwargs:
        kwargs["required_artifacts"] = tuple(kwargs["required_artifacts"])
    try:
        return ScoringConfig(**kwargs)
    except (ScoringConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"scoring: {exc}") from exc


def _parse_runtime(data: Any) -> RuntimeConfig:
    data = _require_mapping(data, "runtime")
    allowed = {
        "workdir_root",
        "interpreter_command",
        "timeout_seconds",
        "artifact_patterns",
        "env_allowlist",
        "main_filename",
    }
    _reject_unknown(data, allowed, "runtime")
    kwargs: dict[str, Any] = dict(data)
    if "workdir_root" in kwargs:
        kwargs["workdir_root"] = Path(kwargs["workdir_root"])
    else:
        kwargs["workdir_root"] = Path("workdir")
    for name in ("interpreter_command", "artifact_patterns", "env_allowlist"):
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    try:
        return RuntimeConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"runtime: {exc}") from exc


def _parse_providers(data: Any) -> dict[str, ProviderConfig]:
    data = _require_mapping(data, "backends.providers")
    allowed = {
        "base_url",
        "api_key_env",
        "max_concurrency",
        "timeout_seconds",
        "chat_path",
        "embed_path",
        "embed_model",
    }
    out: dict[str, ProviderConfig] = {}
    for name, body in data.items():
        body = _require_mapping(body, f"backends.providers.{name}")
        _reject_unknown(body, allowed, f"backends.providers.{name}")
        if "base_url" not in body:
            raise ConfigError(f"backends.providers.{name} needs base_url")
        try:
            out[name] = ProviderConfig(name=name, **body)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"backends.providers.{name}: {exc}") from exc
    return out


def _parse_roles(data: Any) -> dict[str, RoleBinding]:
    data = _require_mapping(data, "backends.roles")
    allowed = {"provider", "model", "temperature", "supports_images", "max_tokens"}
    out: dict[str, RoleBinding] = {}
    for name, body in data.items():
        body = _require_mapping(body, f"backends.roles.{name}")
        _reject_unknown(body, allowed, f"backends.roles.{name}")
        for required in ("provider", "model"):
            if required not in body:
                raise ConfigError(f"backends.roles.{name} needs {required}")
        try:
            out[name] = RoleBinding(**body)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"backends.roles.{name}: {exc}") from exc
    return out


def config_from_dict(data: dict[str, Any]) -> SessionConfig:
    """Build a SessionConfig from a plain dict, naming any unknown key."""
    data = _require_mapping(data, "session config")
    _reject_unknown(data, _SESSION_KEYS | {"backends"}, "session config")
    kwargs: dict[str, Any] = {}
    for key in _SCALAR_KEYS:
        if key in data:
            kwargs[key] = data[key]
    if "action_space" in data:
        kwargs["action_space"] = _parse_action_space(data["action_space"])
    if "scoring" in data:
        kwargs["scoring"] = _parse_scoring(data["scoring"])
    if "runtime" in data:
        kwargs["runtime"] = _parse_runtime(data["runtime"])
    if "backends" in data:
        backends = _require_mapping(data["backends"], "backends")
        _reject_unknown(backends, {"providers", "roles"}, "backends")
        if "providers" in backends:
            kwargs["providers"] = _parse_providers(backends["providers"])
        if "roles" in backends:
            kwargs["roles"] = _parse_roles(backends["roles"])
    try:
        return SessionConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Path) -> SessionConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def with_overrides(config: SessionConfig, overrides: dict[str, Any]) -> SessionConfig:
    """Apply request-level overrides (already-parsed dict) onto a base config."""
    if not overrides:
        return config
    merged = {**_config_to_shallow_dict(config), **overrides}
    return config_from_dict(merged)


def _config_to_shallow_dict(config: SessionConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key in _SCALAR_KEYS:
        out[key] = getattr(config, key)
    out["action_space"] = config.action_space.to_dict()
    out["scoring"] = config.scoring.to_dict()
    runtime = config.runtime
    out["runtime"] = {
        "workdir_root": str(runtime.workdir_root),
        "interpreter_command": list(runtime.interpreter_command),
        "timeout_seconds": runtime.timeout_seconds,
        "artifact_patterns": list(runtime.artifact_patterns),
        "env_allowlist": list(runtime.env_allowlist),
        "main_filename": runtime.main_filename,
    }
    if config.providers or config.roles:
        backends: dict[str, Any] = {}
        if config.providers:
            backends["providers"] = {
                name: {
                    "base_url": p.base_url,
                    "api_key_env": p.api_key_env,
                    "max_concurrency": p.max_concurrency,
                    "timeout_seconds": p.timeout_seconds,
                    "chat_path": p.chat_path,
                    "embed_path": p.embed_path,
                    "embed_model": p.embed_model,
                }
                for name, p in config.providers.items()
            }
        if config.roles:
            backends["roles"] = {
                name: {
                    "provider": r.provider,
                    "model": r.model,
                    "temperature": r.temperature,
                    "supports_images": r.supports_images,
                    "max_tokens": r.max_tokens,
                }
                for name, r in config.roles.items()
            }
        out["backends"] = backends
    return out


def derive_session_id(config: SessionConfig, request_text: str) -> str:
    """Stable id in logical-clock mode so replays are byte-identical."""
    if config.session_id:
        return config.session_id
    if config.clock == "logical":
        import hashlib

        digest = hashlib.sha256(request_text.encode("utf-8")).hexdigest()
        return "s" + digest[:12]
    import uuid

    return uuid.uuid4().hex[:12]
