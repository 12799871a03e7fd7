"""Composite reward scoring.

Four axes, rubric-capped: execution integrity (35), solution accuracy (35,
split into a precision sub-score capped at 20 and a consistency sub-score
capped at 15), reporting detail (15), and method optimality (15). Precision
is scored on a log-linear ramp over one decade above the accuracy target:
full credit at or below the target, zero at ten times the target.

Scoring is pure: no randomness, no globals, no I/O. Advisor-graded axes
arrive as validated AdvisorGrades; machine-checked axes come from the
execution outcome and artifact manifest.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .bandit import RewardBreakdown

if TYPE_CHECKING:
    from .sandbox import ArtifactManifest, ExecutionOutcome

INTEGRITY_BASE = 20.0
INTEGRITY_ARTIFACT_SHARE = 15.0
DETAILS_CAP = 15.0
OPTIMALITY_CAP = 15.0


class ScoringConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScoringConfig:
    """Per-problem scoring knobs; sub-caps must add up to the accuracy cap."""

    epsilon: float = 1e-3
    precision_cap: float = 20.0
    consistency_cap: float = 15.0
    required_artifacts: tuple[str, ...] = ()
    primary_metric: str = "rel_l2"

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0 or not math.isfinite(self.epsilon):
            raise ScoringConfigError("epsilon must be a positive finite float")
        if self.precision_cap < 0.0 or self.consistency_cap < 0.0:
            raise ScoringConfigError("sub-score caps must be non-negative")
        if abs(self.precision_cap + self.consistency_cap - 35.0) > 1e-9:
            raise ScoringConfigError(
                "precision_cap + consistency_cap must equal the 35-point accuracy cap"
            )
        object.__setattr__(self, "required_artifacts", tuple(self.required_artifacts))

    def to_dict(self) -> dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "precision_cap": self.precision_cap,
            "consistency_cap": self.consistency_cap,
            "required_artifacts": list(self.required_artifacts),
            "primary_metric": self.primary_metric,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScoringConfig":
        return cls(
            epsilon=data.get("epsilon", 1e-3),
            precision_cap=data.get("precision_cap", 20.0),
            consistency_cap=data.get("consistency_cap", 15.0),
            required_artifacts=tuple(data.get("required_artifacts", ())),
            primary_metric=data.get("primary_metric", "rel_l2"),
        )


@dataclass(frozen=True)
class AdvisorGrades:
    """Judgement-call axes graded by the advisor, validated at construction."""

    details_grade: float
    optimality_grade: float
    consistency_grade: float
    rationale: str = ""

    def __post_init__(self) -> None:
        if not (0.0 <= self.details_grade <= DETAILS_CAP):
            raise ValueError(f"details_grade outside [0, {DETAILS_CAP}]")
        if not (0.0 <= self.optimality_grade <= OPTIMALITY_CAP):
            raise ValueError(f"optimality_grade outside [0, {OPTIMALITY_CAP}]")
        if not (0.0 <= self.consistency_grade <= 1.0):
            raise ValueError("consistency_grade outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "details_grade": self.details_grade,
            "optimality_grade": self.optimality_grade,
            "consistency_grade": self.consistency_grade,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AdvisorGrades":
        return cls(
            details_grade=float(data["details_grade"]),
            optimality_grade=float(data["optimality_grade"]),
            consistency_grade=float(data["consistency_grade"]),
            rationale=data.get("rationale", ""),
        )


@dataclass(frozen=True)
class AccuracyScore:
    accuracy: float
    precision_sub: float
    consistency_sub: float
    metric_missing: bool = False


def _artifact_fraction(manifest: "ArtifactManifest", required: tuple[str, ...]) -> float:
    if not required:
        return 1.0
    names = [entry.name for entry in manifest.entries]
    hits = sum(
        1 for pattern in required if any(fnmatch.fnmatch(name, pattern) for name in names)
    )
    return hits / len(required)


def score_integrity(
    outcome: "ExecutionOutcome", manifest: "ArtifactManifest", cfg: ScoringConfig
) -> float:
    """0 on any failed run; otherwise base credit plus the artifact fraction."""
    if outcome.exit_code != 0 or outcome.timed_out:
        return 0.0
    fraction = min(max(_artifact_fraction(manifest, cfg.required_artifacts), 0.0), 1.0)
    return INTEGRITY_BASE + INTEGRITY_ARTIFACT_SHARE * fraction


def precision_credit(error: float, cfg: ScoringConfig) -> float:
    """Log-linear ramp: full at error <= epsilon, zero at error >= 10*epsilon."""
    if not math.isfinite(error) or error < 0.0:
        return 0.0
    if error <= cfg.epsilon:
        return cfg.precision_cap
    ceiling = 10.0 * cfg.epsilon
    if error >= ceiling:
        return 0.0
    credit = cfg.precision_cap * (math.log10(ceiling) - math.log10(error))
    return min(max(credit, 0.0), cfg.precision_cap)


def score_accuracy(
    metrics: dict[str, float], grades: AdvisorGrades, cfg: ScoringConfig
) -> AccuracyScore:
    """Precision from the primary error metric, consistency from the advisor."""
    consistency = min(max(grades.consistency_grade, 0.0), 1.0) * cfg.consistency_cap
    if cfg.primary_metric not in metrics:
        return AccuracyScore(
            accuracy=consistency,
            precision_sub=0.0,
            consistency_sub=consistency,
            metric_missing=True,
        )
    precision = precision_credit(float(metrics[cfg.primary_metric]), cfg)
    return AccuracyScore(
        accuracy=precision + consistency,
        precision_sub=precision,
        consistency_sub=consistency,
    )


def compose_reward(
    integrity: float, accuracy: AccuracyScore, grades: AdvisorGrades
) -> RewardBreakdown:
    """Assemble the breakdown; construction re-validates every cap."""
    return RewardBreakdown(
        integrity=integrity,
        accuracy=accuracy.accuracy,
        details=grades.details_grade,
        optimality=grades.optimality_grade,
        precision_sub=accuracy.precision_sub,
        consistency_sub=accuracy.consistency_sub,
    )
