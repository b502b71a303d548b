from __future__ import annotations

import logging
import os
import statistics
from dataclasses import replace
from typing import Any, Sequence

from .checkpoint import latest_checkpoint
from .config import MelConfig
from .errors import ContractError
from .evaluation import compare_policies, compare_runs, evaluate, format_table_row, load_final_params
from .export import export_run, read_events, read_pool
from .metaexp import STATUSES
from .paths import events_path, normalize_run_dir, pool_path
from .taskenv import Query, generate_tasks, load_task_file, parse_gen_spec, save_task_file
from .trainer import run

logger = logging.getLogger(__name__)


def training_tasks(config: MelConfig, task_file: str | None = None) -> list[Query]:
    if task_file:
        return load_task_file(task_file)
    task = config.task
    return generate_tasks(task.family, task.count, task.seed, (task.min_steps, task.max_steps), moduli=task.moduli)


def heldout_tasks(config: MelConfig, task_file: str | None = None) -> list[Query]:
    if task_file:
        return load_task_file(task_file)
    task = config.task
    if task.heldout_count < 1:
        raise ContractError("task.heldout_count must be >= 1 to evaluate without a task file")
    return generate_tasks(
        task.family, task.heldout_count, task.heldout_seed, (task.min_steps, task.max_steps), moduli=task.moduli
    )


def gen_tasks(config: MelConfig, output: str, gen: str | None = None) -> dict[str, Any]:
    task = config.task
    options: dict[str, Any] = {
        "family": task.family,
        "count": task.count,
        "seed": task.seed,
        "difficulty": (task.min_steps, task.max_steps),
        "moduli": task.moduli,
    }
    if gen:
        options.update(parse_gen_spec(gen))
    queries = generate_tasks(
        options["family"], options["count"], options["seed"], options["difficulty"], moduli=options["moduli"]
    )
    save_task_file(output, queries)
    return {
        "path": os.path.abspath(output),
        "count": len(queries),
        "family": options["family"],
        "seed": options["seed"],
        "difficulty": list(options["difficulty"]),
        "moduli": list(options["moduli"]),
    }


def train_run(config: MelConfig, run_dir: str, *, task_file: str | None = None, resume: bool = True) -> dict[str, Any]:
    run_dir = normalize_run_dir(run_dir)
    state = run(config, run_dir, training_tasks(config, task_file), resume=resume)
    events = read_events(events_path(run_dir))
    return {
        "run_dir": run_dir,
        "steps": state.step,
        "last_event": events[-1] if events else None,
        "pool": state.pool.counters(),
    }


def evaluate_run(config: MelConfig, run_dir: str, *, task_file: str | None = None) -> dict[str, Any]:
    params = load_final_params(run_dir)
    tasks = heldout_tasks(config, task_file)
    reports = [evaluate(params, tasks, config.eval, seed=seed) for seed in config.eval.seeds]
    return {
        "run_dir": normalize_run_dir(run_dir),
        "reports": [report.to_dict() for report in reports],
        "rows": [format_table_row(report) for report in reports],
    }


def compare(config: MelConfig, run_a: str, run_b: str, *, task_file: str | None = None) -> dict[str, Any]:
    return compare_runs(run_a, run_b, heldout_tasks(config, task_file), config.eval).to_dict()


def steps_to_reach(rewards: Sequence[float], threshold: float, window: int = 10) -> int | None:
    """First step whose trailing mean reward reaches ``threshold``."""
    for index in range(len(rewards)):
        trailing = rewards[max(0, index - window + 1) : index + 1]
        if sum(trailing) / len(trailing) >= threshold:
            return index + 1
    return None


def experiment(
    config: MelConfig,
    out_dir: str,
    seeds: Sequence[int],
    *,
    task_file: str | None = None,
    window: int = 10,
) -> dict[str, Any]:
    """Train a GRPO arm and a MEL arm per seed and compare them on held-out tasks."""
    if not seeds:
        raise ContractError("experiment needs at least one seed")
    train_tasks = training_tasks(config, task_file)
    eval_tasks = heldout_tasks(config)
    per_seed = []
    for seed in seeds:
        seeded = replace(config.train, seed=seed)
        arms = {
            "grpo": replace(config, train=replace(seeded, lambda_mel=0.0)),
            "mel": replace(config, train=replace(seeded, lambda_mel=config.train.lambda_mel or 1.0)),
        }
        results = {}
        for name, arm in arms.items():
            arm_dir = os.path.join(out_dir, f"seed-{seed}", name)
            state = run(arm, arm_dir, train_tasks, resume=True)
            rewards = [event["mean_reward"] for event in read_events(events_path(arm_dir))]
            results[name] = {"dir": arm_dir, "params": state.params, "rewards": rewards}
        comparison = compare_policies(
            "grpo", results["grpo"]["params"], "mel", results["mel"]["params"], eval_tasks, config.eval
        )
        grpo_rewards = results["grpo"]["rewards"]
        tail = grpo_rewards[-window:]
        target = sum(tail) / len(tail) if tail else 0.0
        per_seed.append(
            {
                "seed": seed,
                "grpo": [report.to_dict() for report in comparison.reports_a],
                "mel": [report.to_dict() for report in comparison.reports_b],
                "pass_at_1_delta": comparison.median_pass_at_1_delta(),
                "baseline_final_reward": target,
                "steps_to_baseline_reward": {
                    "grpo": steps_to_reach(grpo_rewards, target, window),
                    "mel": steps_to_reach(results["mel"]["rewards"], target, window),
                },
            }
        )
        logger.info("seed %d: pass@1 delta %+.4f", seed, per_seed[-1]["pass_at_1_delta"])

    deltas = [entry["pass_at_1_delta"] for entry in per_seed]
    faster = 0
    for entry in per_seed:
        steps = entry["steps_to_baseline_reward"]
        if steps["mel"] is not None and (steps["grpo"] is None or steps["mel"] <= steps["grpo"]):
            faster += 1
    return {
        "out_dir": os.path.abspath(out_dir),
        "seeds": list(seeds),
        "per_seed": per_seed,
        "median_pass_at_1_delta": statistics.median(deltas),
        "wins": {
            "mel": sum(1 for d in deltas if d > 0),
            "grpo": sum(1 for d in deltas if d < 0),
            "tie": sum(1 for d in deltas if d == 0),
        },
        "mel_reaches_baseline_no_later": faster,
    }


def pool_inspect(run_dir: str, *, status: str | None = None, limit: int | None = None) -> dict[str, Any]:
    if status is not None and status not in STATUSES:
        raise ContractError(f"status must be one of {', '.join(STATUSES)}")
    entries = read_pool(pool_path(run_dir))
    selected = [entry for entry in entries if status is None or entry.status == status]
    events_file = events_path(run_dir)
    last = read_events(events_file)[-1:] if os.path.exists(events_file) else []
    if last:
        # pool.jsonl may hold validated entries only; the event log keeps the full counts
        counters = {key: last[0][key] for key in ("candidates", "validated", "rejected", "retention_ratio")}
    else:
        validated = sum(1 for entry in entries if entry.status == "validated")
        rejected = sum(1 for entry in entries if entry.status == "rejected")
        counters = {
            "candidates": len(entries),
            "validated": validated,
            "rejected": rejected,
            "retention_ratio": validated / max(1, validated + rejected),
        }
    return {
        "run_dir": normalize_run_dir(run_dir),
        "counters": counters,
        "matched": len(selected),
        "entries": [entry.to_record() for entry in (selected if limit is None else selected[:limit])],
    }


def export(run_dir: str, what: str, *, output: str | None = None) -> dict[str, Any]:
    return {"what": what, "path": export_run(run_dir, what, output=output)}


def run_status(run_dir: str) -> dict[str, Any]:
    run_dir = normalize_run_dir(run_dir)
    found = latest_checkpoint(run_dir)
    events_file = events_path(run_dir)
    events = read_events(events_file) if os.path.exists(events_file) else []
    return {
        "run_dir": run_dir,
        "steps": events[-1]["step"] if events else 0,
        "latest_checkpoint": None if found is None else {"step": found[0], "path": found[1]},
        "last_event": events[-1] if events else None,
    }
