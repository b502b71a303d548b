from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence, TypeVar

import torch

from .analyst import RemoteAnalyst
from .checkpoint import checkpoint_load, checkpoint_save, latest_checkpoint, list_checkpoints
from .config import MelConfig, TrainConfig, resolved_config_text
from .errors import AnalystTransportError, SerializationError
from .export import export_run
from .files import append_jsonl, iter_jsonl, write_atomic, write_jsonl
from .grpo import GrpoGradient, RolloutGroup, grpo_gradient, rollout_group
from .internalize import InternalizationBatch, meta_gradient, meta_return, nll_loss, retrospective_context
from .metaexp import (
    Analyst,
    ContrastivePair,
    MetaExperience,
    ScriptedAnalyst,
    build_pairs,
    serialize_meta_experience,
    validate_by_replay,
)
from .paths import checkpoint_path, events_path, pool_path, resolved_config_path
from .policy import PolicyParams, gradient_norm, log_prob_grad, sequence_log_prob
from .rng import derive_seed, stream
from .state import EventRecord, TrainState
from .taskenv import Query, generate_tasks, solution_tokens
from .vocab import MODCHAIN_VOCAB, Vocabulary

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def fan_out(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    """Ordered map; results come back in input order whatever the worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def build_analyst(config: TrainConfig) -> Analyst | None:
    if not config.mel_enabled:
        return None
    if config.analyst.backend == "remote":
        return RemoteAnalyst(config.analyst)
    return ScriptedAnalyst()


def select_queries(tasks: Sequence[Query], count: int, seed: int, step: int) -> list[Query]:
    gen = stream(seed, "tasks", step)
    if count <= len(tasks):
        order = torch.randperm(len(tasks), generator=gen)[:count].tolist()
    else:
        order = torch.randint(len(tasks), (count,), generator=gen).tolist()
    return [tasks[i] for i in order]


def warm_start(params: PolicyParams, tasks: Sequence[Query], config: TrainConfig) -> list[float]:
    """Token-averaged NLL ascent on oracle solutions so rollouts start well-formed.

    Returns the demonstration NLL before each update.
    """
    if config.warmup_steps == 0 or config.warmup_demos == 0 or not tasks:
        return []
    gen = stream(config.seed, "warmup")
    count = min(config.warmup_demos, len(tasks))
    demos = [tasks[i] for i in torch.randperm(len(tasks), generator=gen)[:count].tolist()]
    targets = [solution_tokens(query, params.vocab) for query in demos]
    history: list[float] = []
    for _ in range(config.warmup_steps):
        gradient = torch.zeros_like(params.weights)
        nll = 0.0
        for query, target in zip(demos, targets):
            nll -= float(sequence_log_prob(params, query.prompt_tokens, target).mean())
            gradient += log_prob_grad(params, query.prompt_tokens, target) / len(target)
        history.append(nll / len(demos))
        params.ascend(gradient / len(demos), config.warmup_learning_rate)
    logger.info("warm start: demo nll %.4f -> %.4f over %d updates", history[0], history[-1], len(history))
    return history


@dataclass(frozen=True)
class _Job:
    pair: ContrastivePair
    query: Query


@dataclass
class MelStepResult:
    entries: list[MetaExperience]
    batch: InternalizationBatch | None
    pairs: int
    analyst_failures: int


def construct_meta_experiences(
    state: TrainState,
    config: TrainConfig,
    groups: Sequence[RolloutGroup],
    queries: Sequence[Query],
    analyst: Analyst,
    step: int,
) -> MelStepResult:
    """Pairs, analysis and replay validation for one step; analyst errors never escape."""
    vocab = state.params.vocab
    by_id = {query.id: query for query in queries}
    pair_seed = derive_seed(config.seed, "pairs", step)
    jobs: list[_Job] = []
    seen: set[str] = set()
    for group in groups:
        if group.query_id in seen:
            continue
        seen.add(group.query_id)
        jobs.extend(_Job(pair, by_id[group.query_id]) for pair in build_pairs(group, config.pair_cap, pair_seed))

    workers = config.analyst.max_in_flight if isinstance(analyst, RemoteAnalyst) else config.workers
    remote = analyst if isinstance(analyst, RemoteAnalyst) else None
    replay_seed = derive_seed(config.seed, "replay", step)

    def run_job(job: _Job) -> tuple[MetaExperience, list[int] | None] | None:
        try:
            me = analyst.analyze(job.pair, job.query, step)
        except AnalystTransportError as exc:
            logger.warning("analysis failed for %s: %s", job.pair.negative.trajectory_id, exc)
            return None
        if me.status != "candidate":
            return me, None
        try:
            target = serialize_meta_experience(me, config.serialization, vocab)
        except SerializationError as exc:
            logger.warning("cannot serialize %s as %s: %s", me.id, config.serialization, exc)
            return me.transition("rejected", f"serialization failed: {exc}"), None
        me = validate_by_replay(me, job.query, state.snapshot, config.replay, run_seed=replay_seed, remote=remote)
        return me, target

    outcomes = fan_out(run_job, jobs, workers)
    entries: list[MetaExperience] = []
    items = []
    failures = 0
    for job, outcome in zip(jobs, outcomes):
        if outcome is None:
            failures += 1
            continue
        me, target = outcome
        if state.pool.get(me.id) is not None:
            continue
        state.pool.add(me)
        entries.append(me)
        if me.status == "validated":
            context = retrospective_context(
                vocab, job.query.prompt_tokens, job.pair.positive.tokens, job.pair.negative.tokens
            )
            items.append((me, context, target))
    batch = InternalizationBatch.build(items) if items else None
    return MelStepResult(entries=entries, batch=batch, pairs=len(jobs), analyst_failures=failures)


def _chunks(items: Sequence[T], size: int) -> Iterable[Sequence[T]]:
    for start in range(0, len(items), size):
        yield items[start : start + size]


def train_step(
    state: TrainState,
    config: TrainConfig,
    tasks: Sequence[Query],
    *,
    analyst: Analyst | None = None,
) -> EventRecord:
    """One joint update; mutates ``state`` and returns the step's event."""
    started = time.perf_counter()
    step = state.step + 1
    snapshot = state.params.snapshot()
    state.snapshot = snapshot
    queries = select_queries(tasks, config.queries_per_step, config.seed, step)
    decoding = replace(config.decoding, seed=derive_seed(config.seed, "decoding", config.decoding.seed))

    groups = fan_out(
        lambda query: rollout_group(state.params, snapshot, query, config.group_size, decoding, step=step),
        queries,
        config.workers,
    )

    if analyst is None and config.mel_enabled and config.analyst.backend == "scripted":
        analyst = ScriptedAnalyst()
    mel = MelStepResult(entries=[], batch=None, pairs=0, analyst_failures=0)
    if config.mel_enabled and analyst is not None:
        mel = construct_meta_experiences(state, config, groups, queries, analyst, step)

    nll = ret = None
    if mel.batch is not None:
        nll = nll_loss(state.params, mel.batch)
        ret = meta_return(state.params, mel.batch)
    elif config.mel_enabled:
        logger.warning("step %d: no validated meta-experiences, MEL term skipped", step)

    first: GrpoGradient | None = None
    clipped = tokens = 0
    mel_norm = joint_norm = 0.0
    for _ in range(config.clip.inner_epochs):
        for mini_batch in _chunks(groups, config.effective_mini_batch):
            result = grpo_gradient(state.params, snapshot, mini_batch, config.clip)
            clipped += result.clipped_tokens
            tokens += result.total_tokens
            joint = result.gradient
            mel_grad = None
            if mel.batch is not None:
                mel_grad = meta_gradient(state.params, mel.batch)
                joint = joint + config.lambda_mel * mel_grad
            if first is None:
                first = result
                mel_norm = gradient_norm(mel_grad) if mel_grad is not None else 0.0
                joint_norm = gradient_norm(joint)
            state.params.ascend(joint, config.clip.learning_rate)

    rewards = [reward for group in groups for reward in group.rewards]
    state.step = step
    state.bump("analyst_failures", mel.analyst_failures)
    state.bump("rollouts", len(rewards))
    counters = state.pool.counters()
    elapsed = time.perf_counter() - started
    event = EventRecord(
        step=step,
        mean_reward=sum(rewards) / len(rewards),
        degenerate_fraction=sum(int(group.degenerate) for group in groups) / len(groups),
        extraction_failures=sum(group.extraction_failures for group in groups),
        clipped_fraction=clipped / tokens if tokens else 0.0,
        kl=first.kl if first else 0.0,
        pairs=mel.pairs,
        step_candidates=len(mel.entries),
        step_validated=sum(1 for me in mel.entries if me.status == "validated"),
        candidates=counters["candidates"],
        validated=counters["validated"],
        rejected=counters["rejected"],
        retention_ratio=counters["retention_ratio"],
        analyst_failures=mel.analyst_failures,
        mel_batch=len(mel.batch) if mel.batch is not None else 0,
        mel_skipped=mel.batch is None,
        nll_loss=nll,
        meta_return=ret,
        grpo_objective=first.objective if first else 0.0,
        grpo_grad_norm=gradient_norm(first.gradient) if first else 0.0,
        mel_grad_norm=mel_norm,
        joint_grad_norm=joint_norm,
        wall_clock=elapsed,
    )
    logger.info(
        "step %d reward=%.4f degenerate=%.3f pairs=%d validated=%d/%d retention=%.3f nll=%s (%.2fs)",
        step,
        event.mean_reward,
        event.degenerate_fraction,
        event.pairs,
        event.step_validated,
        event.step_candidates,
        event.retention_ratio,
        "-" if nll is None else f"{nll:.4f}",
        elapsed,
    )
    return event


def _truncate_jsonl(path: str, keep: Callable[[dict], bool]) -> None:
    if not os.path.exists(path):
        return
    kept = [record for _, record in iter_jsonl(path) if keep(record)]
    write_jsonl(path, kept)


def run(
    config: MelConfig,
    run_dir: str,
    tasks: Sequence[Query] | None = None,
    *,
    analyst: Analyst | None = None,
    resume: bool = True,
    vocab: Vocabulary = MODCHAIN_VOCAB,
) -> TrainState:
    """Train for ``total_steps``; resumes from the newest checkpoint in ``run_dir``."""
    train = config.train
    os.makedirs(run_dir, exist_ok=True)
    write_atomic(resolved_config_path(run_dir), resolved_config_text(config).encode("utf-8"))
    if tasks is None:
        task = config.task
        tasks = generate_tasks(
            task.family, task.count, task.seed, (task.min_steps, task.max_steps), moduli=task.moduli, vocab=vocab
        )

    found = latest_checkpoint(run_dir) if resume else None
    if found is not None:
        _, path = found
        state = checkpoint_load(path)
        logger.info("resuming %s from step %d", run_dir, state.step)
        _truncate_jsonl(events_path(run_dir), lambda record: record.get("step", 0) <= state.step)
        _truncate_jsonl(pool_path(run_dir), lambda record: record["provenance"]["step"] <= state.step)
    else:
        state = TrainState.fresh(vocab, train.policy, train.seed)
        stale = [events_path(run_dir), pool_path(run_dir), *(path for _, path in list_checkpoints(run_dir))]
        for path in stale:
            if os.path.exists(path):
                os.remove(path)
        warm_start(state.params, tasks, train)

    owns_analyst = analyst is None
    if analyst is None:
        analyst = build_analyst(train)
    try:
        while state.step < train.total_steps:
            before = len(state.pool)
            event = train_step(state, train, tasks, analyst=analyst)
            append_jsonl(events_path(run_dir), event.to_record(include_wall_clock=not train.deterministic))
            for entry in state.pool.entries[before:]:
                if train.pool_persist == "all" or entry.status == "validated":
                    append_jsonl(pool_path(run_dir), entry.to_record())
            if state.step % train.checkpoint_interval == 0 or state.step == train.total_steps:
                checkpoint_save(state, checkpoint_path(run_dir, state.step))
    finally:
        if owns_analyst and isinstance(analyst, RemoteAnalyst):
            analyst.close()
    if state.step == 0:
        checkpoint_save(state, checkpoint_path(run_dir, 0))
    if not os.path.exists(events_path(run_dir)):
        write_atomic(events_path(run_dir), b"")
    export_run(run_dir, "metrics-csv")
    return state
