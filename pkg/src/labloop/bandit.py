"""Online-learning primitives for the research loop.

The loop is framed as a contextual bandit: each iteration the policy commits
to an action drawn from a finite space (representation x constraint handling
x optimizer), the sandbox produces an observation, and the reward engine
produces a breakdown. This module owns the value types for that accounting
plus regret and reward-delta diagnostics. Everything here is deliberately
free of I/O so histories can be rebuilt from logs and reasoned about in
tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence


class BanditError(Exception):
    """Base class for action/history accounting failures."""


class UnknownIdentifierError(BanditError):
    """An action referenced an identifier outside the configured space."""

    def __init__(self, axis: str, value: str, options: Sequence[str]):
        self.axis = axis
        self.value = value
        self.options = tuple(options)
        super().__init__(
            f"unknown {axis} identifier {value!r}; configured options: {', '.join(options)}"
        )


class EmptyHistoryError(BanditError):
    pass


class TooShortHistoryError(BanditError):
    pass


class RewardBoundsError(BanditError):
    """A reward component fell outside its cap."""

    def __init__(self, axis: str, value: float, low: float, high: float):
        self.axis = axis
        self.value = value
        super().__init__(f"{axis}={value!r} outside [{low}, {high}]")


def _as_tuple(value: Iterable[str]) -> tuple[str, ...]:
    return tuple(value)


@dataclass(frozen=True)
class ActionSpace:
    """Finite action space: one option per axis makes an action."""

    rep_options: tuple[str, ...]
    constraint_options: tuple[str, ...]
    opt_options: tuple[str, ...]

    def __post_init__(self) -> None:
        for axis in ("rep_options", "constraint_options", "opt_options"):
            options = _as_tuple(getattr(self, axis))
            object.__setattr__(self, axis, options)
            if not options:
                raise ValueError(f"{axis} must be non-empty")
            if len(set(options)) != len(options):
                raise ValueError(f"{axis} contains duplicates: {options}")
            if any(not isinstance(opt, str) or not opt for opt in options):
                raise ValueError(f"{axis} entries must be non-empty strings")

    @property
    def size(self) -> int:
        return len(self.rep_options) * len(self.constraint_options) * len(self.opt_options)

    def axes(self) -> dict[str, tuple[str, ...]]:
        return {
            "rep": self.rep_options,
            "constraint": self.constraint_options,
            "opt": self.opt_options,
        }

    def combos(self) -> list[tuple[str, str, str]]:
        return [
            (rep, constraint, opt)
            for rep in self.rep_options
            for constraint in self.constraint_options
            for opt in self.opt_options
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rep_options": list(self.rep_options),
            "constraint_options": list(self.constraint_options),
            "opt_options": list(self.opt_options),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ActionSpace":
        return cls(
            rep_options=tuple(data["rep_options"]),
            constraint_options=tuple(data["constraint_options"]),
            opt_options=tuple(data["opt_options"]),
        )


@dataclass(frozen=True)
class Action:
    """One committed choice per axis plus the free-text plan behind it."""

    rep: str
    constraint: str
    opt: str
    free_text_plan: str = ""
    iteration: int = 0

    def __post_init__(self) -> None:
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")

    def arm(self) -> tuple[str, str, str]:
        return (self.rep, self.constraint, self.opt)

    def to_dict(self) -> dict[str, Any]:
        return {
            "rep": self.rep,
            "constraint": self.constraint,
            "opt": self.opt,
            "free_text_plan": self.free_text_plan,
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Action":
        return cls(
            rep=data["rep"],
            constraint=data["constraint"],
            opt=data["opt"],
            free_text_plan=data.get("free_text_plan", ""),
            iteration=data.get("iteration", 0),
        )


def validate_action(action: Action, space: ActionSpace) -> None:
    """Raise UnknownIdentifierError naming the offending axis."""
    for axis, options in (
        ("rep", space.rep_options),
        ("constraint", space.constraint_options),
        ("opt", space.opt_options),
    ):
        value = getattr(action, axis)
        if value not in options:
            raise UnknownIdentifierError(axis, value, options)


@dataclass(frozen=True)
class Observation:
    """What came back from one sandboxed execution."""

    exit_code: int
    log_excerpt: str
    metrics: dict[str, float] = field(default_factory=dict)
    artifact_paths: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for key, value in self.metrics.items():
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"metric {key!r} must be finite, got {value!r}")
        object.__setattr__(self, "artifact_paths", tuple(self.artifact_paths))

    def to_dict(self) -> dict[str, Any]:
        return {
            "exit_code": self.exit_code,
            "log_excerpt": self.log_excerpt,
            "metrics": {key: float(self.metrics[key]) for key in sorted(self.metrics)},
            "artifact_paths": list(self.artifact_paths),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Observation":
        return cls(
            exit_code=data["exit_code"],
            log_excerpt=data["log_excerpt"],
            metrics={k: float(v) for k, v in data.get("metrics", {}).items()},
            artifact_paths=tuple(data.get("artifact_paths", ())),
        )


INTEGRITY_CAP = 35.0
ACCURACY_CAP = 35.0
DETAILS_CAP = 15.0
OPTIMALITY_CAP = 15.0
_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RewardBreakdown:
    """Composite score; components clamped to caps, total in [0, 100]."""

    integrity: float
    accuracy: float
    details: float
    optimality: float
    precision_sub: float
    consistency_sub: float

    def __post_init__(self) -> None:
        bounds = (
            ("integrity", self.integrity, INTEGRITY_CAP),
            ("accuracy", self.accuracy, ACCURACY_CAP),
            ("details", self.details, DETAILS_CAP),
            ("optimality", self.optimality, OPTIMALITY_CAP),
            ("precision_sub", self.precision_sub, ACCURACY_CAP),
            ("consistency_sub", self.consistency_sub, ACCURACY_CAP),
        )
        for axis, value, cap in bounds:
            if not math.isfinite(value) or value < -_SUM_TOLERANCE or value > cap + _SUM_TOLERANCE:
                raise RewardBoundsError(axis, value, 0.0, cap)
        if abs((self.precision_sub + self.consistency_sub) - self.accuracy) > _SUM_TOLERANCE:
            raise RewardBoundsError(
                "accuracy", self.accuracy, self.precision_sub + self.consistency_sub,
                self.precision_sub + self.consistency_sub,
            )
        if self.total() > 100.0 + _SUM_TOLERANCE:
            raise RewardBoundsError("total", self.total(), 0.0, 100.0)

    def total(self) -> float:
        return self.integrity + self.accuracy + self.details + self.optimality

    def to_dict(self) -> dict[str, Any]:
        return {
            "integrity": self.integrity,
            "accuracy": self.accuracy,
            "details": self.details,
            "optimality": self.optimality,
            "precision_sub": self.precision_sub,
            "consistency_sub": self.consistency_sub,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RewardBreakdown":
        return cls(
            integrity=data["integrity"],
            accuracy=data["accuracy"],
            details=data["details"],
            optimality=data["optimality"],
            precision_sub=data["precision_sub"],
            consistency_sub=data["consistency_sub"],
        )


def reward_total(reward: RewardBreakdown) -> float:
    return reward.total()


@dataclass(frozen=True)
class CodeStateRef:
    """Pointer to the executed source: path relative to the project dir + hash."""

    path: str
    sha256: str

    def to_dict(self) -> dict[str, Any]:
        return {"path": self.path, "sha256": self.sha256}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CodeStateRef":
        return cls(path=data["path"], sha256=data["sha256"])


@dataclass(frozen=True)
class TrialRecord:
    """One loop iteration: action taken, code ref, observation, reward, diagnosis."""

    iteration: int
    action: Action
    code_state_ref: CodeStateRef
    observation: Observation
    reward: RewardBreakdown
    diagnosis: dict[str, Any] = field(default_factory=dict)
    started: float = 0.0
    ended: float = 0.0
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.iteration < 1:
            raise ValueError("iteration numbering starts at 1")
        if self.ended < self.started:
            raise ValueError("ended precedes started")

    def to_dict(self) -> dict[str, Any]:
        from .serde import sorted_deep

        return {
            "iteration": self.iteration,
            "action": self.action.to_dict(),
            "code_state_ref": self.code_state_ref.to_dict(),
            "observation": self.observation.to_dict(),
            "reward": self.reward.to_dict(),
            "diagnosis": sorted_deep(self.diagnosis),
            "started": self.started,
            "ended": self.ended,
            "extras": sorted_deep(self.extras),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrialRecord":
        return cls(
            iteration=data["iteration"],
            action=Action.from_dict(data["action"]),
            code_state_ref=CodeStateRef.from_dict(data["code_state_ref"]),
            observation=Observation.from_dict(data["observation"]),
            reward=RewardBreakdown.from_dict(data["reward"]),
            diagnosis=data.get("diagnosis", {}),
            started=data.get("started", 0.0),
            ended=data.get("ended", 0.0),
            extras=data.get("extras", {}),
        )


class TrialHistory:
    """Append-only, contiguous record of a session's iterations."""

    def __init__(self, session_id: str):
        if not session_id:
            raise ValueError("session_id must be non-empty")
        self.session_id = session_id
        self._records: list[TrialRecord] = []

    @property
    def records(self) -> tuple[TrialRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def append(self, record: TrialRecord) -> None:
        expected = len(self._records) + 1
        if record.iteration != expected:
            raise ValueError(
                f"iterations must be contiguous from 1: expected {expected}, got {record.iteration}"
            )
        self._records.append(record)

    def last(self) -> TrialRecord:
        if not self._records:
            raise EmptyHistoryError("history has no records")
        return self._records[-1]

    def rewards(self) -> list[float]:
        return [record.reward.total() for record in self._records]


def empirical_regret(history: TrialHistory, r_star: float) -> float:
    """Sum of (r_star - observed reward); r_star must dominate the history."""
    totals = history.rewards()
    if not totals:
        raise EmptyHistoryError("cannot compute regret over an empty history")
    best = max(totals)
    if r_star < best - _SUM_TOLERANCE:
        raise ValueError(f"r_star={r_star} is below the best observed reward {best}")
    return float(sum(r_star - total for total in totals))


def submartingale_deltas(history: TrialHistory) -> list[float]:
    """Consecutive reward differences; the loop aims to keep these >= 0."""
    totals = history.rewards()
    if len(totals) < 2:
        raise TooShortHistoryError("need at least two records for deltas")
    return [totals[i + 1] - totals[i] for i in range(len(totals) - 1)]
