from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

from .checkpoint import checkpoint_load, latest_checkpoint
from .config import DecodingConfig, EvalConfig
from .errors import CheckpointError, ContractError
from .policy import Policy, PolicyParams, sample
from .rng import stream
from .taskenv import Query, verify
from .trainer import fan_out

logger = logging.getLogger(__name__)

METRICS = ("pass_at_1", "avg_at_k", "pass_at_k")


@dataclass(frozen=True)
class EvalReport:
    k: int
    seed: int
    greedy: tuple[int, ...]
    rewards: tuple[tuple[int, ...], ...]
    pass_at_1: float
    avg_at_k: float
    pass_at_k: float
    by_family: dict[str, dict[str, float]] = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        return {"pass_at_1": self.pass_at_1, "avg_at_k": self.avg_at_k, "pass_at_k": self.pass_at_k}

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "seed": self.seed,
            "tasks": len(self.greedy),
            **self.metrics(),
            "by_family": self.by_family,
        }


def metrics_from_matrix(greedy: Sequence[int], rewards: Sequence[Sequence[int]]) -> tuple[float, float, float]:
    """Pass@1 from greedy rewards; Avg@k and any-of-k Pass@k from the tasks x k matrix."""
    if not greedy or len(greedy) != len(rewards):
        raise ContractError("need one greedy reward and one sample row per task")
    if any(not row for row in rewards):
        raise ContractError("every task needs at least one sample")
    pass_at_1 = sum(greedy) / len(greedy)
    avg_at_k = sum(sum(row) / len(row) for row in rewards) / len(rewards)
    pass_at_k = sum(1 for row in rewards if any(row)) / len(rewards)
    return pass_at_1, avg_at_k, pass_at_k


def _task_rewards(policy: Policy, query: Query, config: EvalConfig, seed: int) -> tuple[int, tuple[int, ...]]:
    greedy_config = DecodingConfig(temperature=config.temperature_pass1, max_tokens=config.max_tokens, seed=seed)
    greedy = sample(
        policy, query.prompt_tokens, greedy_config, generator=stream(seed, "eval-greedy", query.id)
    )
    sample_config = replace(greedy_config, temperature=config.temperature_k)
    row = []
    for index in range(config.k):
        trajectory = sample(
            policy, query.prompt_tokens, sample_config, generator=stream(seed, "eval", query.id, index)
        )
        row.append(verify(trajectory, query.ground_truth).reward)
    return verify(greedy, query.ground_truth).reward, tuple(row)


def evaluate(policy: Policy, tasks: Sequence[Query], config: EvalConfig, *, seed: int | None = None) -> EvalReport:
    if not tasks:
        raise ContractError("evaluation needs at least one task")
    seed = config.seeds[0] if seed is None else seed
    results = fan_out(lambda query: _task_rewards(policy, query, config, seed), list(tasks), config.workers)
    greedy = tuple(result[0] for result in results)
    rewards = tuple(result[1] for result in results)
    pass_at_1, avg_at_k, pass_at_k = metrics_from_matrix(greedy, rewards)

    groups: dict[str, list[int]] = {}
    for position, query in enumerate(tasks):
        groups.setdefault(f"{query.family}/L{query.chain_length}", []).append(position)
    by_family = {}
    for name, positions in sorted(groups.items()):
        p1, avg, pk = metrics_from_matrix([greedy[i] for i in positions], [rewards[i] for i in positions])
        by_family[name] = {"tasks": len(positions), "pass_at_1": p1, "avg_at_k": avg, "pass_at_k": pk}

    return EvalReport(
        k=config.k,
        seed=seed,
        greedy=greedy,
        rewards=rewards,
        pass_at_1=pass_at_1,
        avg_at_k=avg_at_k,
        pass_at_k=pass_at_k,
        by_family=by_family,
    )


def format_table_row(report: EvalReport) -> str:
    """``Pass@1 / Avg@k / Pass@k`` as percentages with two decimals."""
    return " / ".join(f"{100 * value:.2f}" for value in (report.pass_at_1, report.avg_at_k, report.pass_at_k))


def load_final_params(run_dir: str) -> PolicyParams:
    found = latest_checkpoint(run_dir)
    if found is None:
        raise CheckpointError(run_dir, "run directory has no checkpoints")
    return checkpoint_load(found[1]).params


@dataclass(frozen=True)
class ComparisonReport:
    run_a: str
    run_b: str
    seeds: tuple[int, ...]
    reports_a: tuple[EvalReport, ...]
    reports_b: tuple[EvalReport, ...]

    def deltas(self) -> dict[str, float]:
        """Mean over seeds of ``b - a`` per metric."""
        return {
            metric: statistics.fmean(
                getattr(b, metric) - getattr(a, metric) for a, b in zip(self.reports_a, self.reports_b)
            )
            for metric in METRICS
        }

    def median_pass_at_1_delta(self) -> float:
        return statistics.median(b.pass_at_1 - a.pass_at_1 for a, b in zip(self.reports_a, self.reports_b))

    def wins(self) -> dict[str, int]:
        outcome = {"b": 0, "a": 0, "tie": 0}
        for a, b in zip(self.reports_a, self.reports_b):
            key = "b" if b.pass_at_1 > a.pass_at_1 else "a" if a.pass_at_1 > b.pass_at_1 else "tie"
            outcome[key] += 1
        return outcome

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_a": self.run_a,
            "run_b": self.run_b,
            "seeds": list(self.seeds),
            "a": [report.to_dict() for report in self.reports_a],
            "b": [report.to_dict() for report in self.reports_b],
            "rows": {
                "a": [format_table_row(report) for report in self.reports_a],
                "b": [format_table_row(report) for report in self.reports_b],
            },
            "deltas": self.deltas(),
            "median_pass_at_1_delta": self.median_pass_at_1_delta(),
            "wins": self.wins(),
        }


def compare_policies(
    label_a: str,
    policy_a: Policy,
    label_b: str,
    policy_b: Policy,
    tasks: Sequence[Query],
    config: EvalConfig,
) -> ComparisonReport:
    reports_a = tuple(evaluate(policy_a, tasks, config, seed=seed) for seed in config.seeds)
    reports_b = tuple(evaluate(policy_b, tasks, config, seed=seed) for seed in config.seeds)
    return ComparisonReport(label_a, label_b, tuple(config.seeds), reports_a, reports_b)


def compare_runs(run_a: str, run_b: str, tasks: Sequence[Query], config: EvalConfig) -> ComparisonReport:
    """Evaluate both final checkpoints on the same tasks and seeds; deltas are ``b - a``."""
    params_a = load_final_params(run_a)
    params_b = load_final_params(run_b)
    report = compare_policies(run_a, params_a, run_b, params_b, tasks, config)
    logger.info("compare %s vs %s: deltas %s", run_a, run_b, report.deltas())
    return report
