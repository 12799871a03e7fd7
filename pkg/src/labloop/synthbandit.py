"""Synthetic bandit harness.

A seeded stand-in environment for the real research loop: every combo in an
ActionSpace is an arm with a fixed payout drawn once per seed. It exists to
exercise action validation, TrialHistory bookkeeping, and regret accounting
without any backend or sandbox, and to check the loop-level diagnostic that
a history-exploiting policy beats uniform play.

Payouts are deterministic within a seed (optional gaussian noise is off by
default): re-running the same code state in the real loop is likewise
near-deterministic, and across-seed variation supplies the randomness the
diagnostics average over.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .bandit import (
    Action,
    ActionSpace,
    CodeStateRef,
    Observation,
    RewardBreakdown,
    TrialHistory,
    TrialRecord,
    validate_action,
)

Combo = tuple[str, str, str]


def scalar_breakdown(total: float) -> RewardBreakdown:
    """Spread a scalar in [0, 100] across the reward axes, caps respected."""
    total = min(max(total, 0.0), 100.0)
    integrity = min(total, 35.0)
    remainder = total - integrity
    precision = min(remainder, 20.0)
    remainder -= precision
    consistency = min(remainder, 15.0)
    remainder -= consistency
    details = min(remainder, 15.0)
    remainder -= details
    optimality = min(remainder, 15.0)
    return RewardBreakdown(
        integrity=integrity,
        accuracy=precision + consistency,
        details=details,
        optimality=optimality,
        precision_sub=precision,
        consistency_sub=consistency,
    )


class SyntheticEnv:
    """Fixed-payout arms over an action space; payouts drawn once per seed."""

    def __init__(self, space: ActionSpace, seed: int, noise_sigma: float = 0.0):
        self.space = space
        self.noise_sigma = noise_sigma
        self._rng = random.Random(seed)
        self.means: dict[Combo, float] = {
            combo: self._rng.uniform(40.0, 95.0) for combo in space.combos()
        }

    @property
    def best_mean(self) -> float:
        return max(self.means.values())

    @property
    def mean_payout(self) -> float:
        return sum(self.means.values()) / len(self.means)

    def pull(self, combo: Combo) -> float:
        payout = self.means[combo]
        if self.noise_sigma > 0.0:
            payout += self._rng.gauss(0.0, self.noise_sigma)
        return min(max(payout, 0.0), 100.0)


class UniformRandomPolicy:
    """Baseline: ignores history entirely."""

    def __init__(self, combos: list[Combo], rng: random.Random):
        self._combos = list(combos)
        self._rng = rng

    def choose(self) -> Combo:
        return self._rng.choice(self._combos)

    def observe(self, combo: Combo, reward: float) -> None:
        pass


class GreedyCommitPolicy:
    """History-exploiting: sweep every arm once, then commit to the best seen."""

    def __init__(self, combos: list[Combo], rng: random.Random):
        self._sweep = rng.sample(list(combos), len(combos))
        self._estimates: dict[Combo, float] = {}
        self._step = 0

    def choose(self) -> Combo:
        if self._step < len(self._sweep):
            return self._sweep[self._step]
        return max(self._estimates, key=lambda combo: (self._estimates[combo], combo))

    def observe(self, combo: Combo, reward: float) -> None:
        self._step += 1
        seen = self._estimates.get(combo)
        self._estimates[combo] = reward if seen is None else (seen + reward) / 2.0


def run_episode(
    env: SyntheticEnv,
    policy: UniformRandomPolicy | GreedyCommitPolicy,
    num_steps: int,
    session_id: str = "episode",
) -> TrialHistory:
    """Drive the policy against the env, recording full trial bookkeeping."""
    history = TrialHistory(session_id)
    for step in range(1, num_steps + 1):
        combo = policy.choose()
        action = Action(rep=combo[0], constraint=combo[1], opt=combo[2], iteration=step)
        validate_action(action, env.space)
        reward = env.pull(combo)
        policy.observe(combo, reward)
        history.append(
            TrialRecord(
                iteration=step,
                action=action,
                code_state_ref=CodeStateRef(path="", sha256=""),
                observation=Observation(exit_code=0, log_excerpt=""),
                reward=scalar_breakdown(reward),
            )
        )
    return history


@dataclass
class HarnessSummary:
    """Cross-seed comparison of a learning policy against uniform play."""

    greedy_mean_cumulative_regret: float
    uniform_mean_cumulative_regret: float
    mean_deltas: list[float] = field(default_factory=list)

    @property
    def fraction_nonnegative_deltas(self) -> float:
        if not self.mean_deltas:
            return 0.0
        hits = sum(1 for delta in self.mean_deltas if delta >= 0.0)
        return hits / len(self.mean_deltas)


def compare_policies(space: ActionSpace, num_steps: int, seeds: range) -> HarnessSummary:
    """Run greedy and uniform policies across seeds; average the diagnostics."""
    from .bandit import empirical_regret

    greedy_regrets: list[float] = []
    uniform_regrets: list[float] = []
    delta_sums = [0.0] * (num_steps - 1)
    for seed in seeds:
        env_greedy = SyntheticEnv(space, seed)
        greedy = GreedyCommitPolicy(list(env_greedy.means), random.Random(seed * 7 + 1))
        greedy_history = run_episode(env_greedy, greedy, num_steps, f"greedy-{seed}")
        greedy_regrets.append(empirical_regret(greedy_history, env_greedy.best_mean))

        env_uniform = SyntheticEnv(space, seed)
        uniform = UniformRandomPolicy(list(env_uniform.means), random.Random(seed * 7 + 2))
        uniform_history = run_episode(env_uniform, uniform, num_steps, f"uniform-{seed}")
        uniform_regrets.append(empirical_regret(uniform_history, env_uniform.best_mean))

        rewards = greedy_history.rewards()
        for idx in range(num_steps - 1):
            delta_sums[idx] += rewards[idx + 1] - rewards[idx]

    count = float(len(list(seeds)))
    return HarnessSummary(
        greedy_mean_cumulative_regret=sum(greedy_regrets) / count,
        uniform_mean_cumulative_regret=sum(uniform_regrets) / count,
        mean_deltas=[total / count for total in delta_sums],
    )
