import os
from dataclasses import replace

import pytest
import torch

from mel import trainer
from mel.checkpoint import checkpoint_load, latest_checkpoint
from mel.config import AnalystConfig, DecodingConfig, EvalConfig, MelConfig, TaskConfig, TrainConfig
from mel.errors import AnalystTransportError
from mel.evaluation import evaluate
from mel.export import read_events, read_pool
from mel.grpo import RolloutGroup, grpo_gradient
from mel.internalize import meta_gradient
from mel.metaexp import ScriptedAnalyst
from mel.operations import pool_inspect
from mel.paths import events_path, metrics_csv_path, pool_path, resolved_config_path
from mel.policy import PolicyParams
from mel.state import EVENT_COLUMNS, TrainState
from mel.taskenv import build_trajectory, generate_tasks, solution_tokens
from mel.trainer import construct_meta_experiences, fan_out, run, select_queries, train_step, warm_start
from mel.vocab import MODCHAIN_VOCAB


@pytest.fixture
def tasks():
    return generate_tasks("modchain", 16, 0, (1, 2))


def _config(train):
    return MelConfig(task=TaskConfig(count=16, heldout_count=8), train=train)


def _read(path):
    with open(path, "rb") as handle:
        return handle.read()


def test_fan_out_keeps_input_order():
    items = list(range(20))
    assert fan_out(lambda x: x * x, items, 4) == [x * x for x in items]
    assert fan_out(lambda x: x, [], 4) == []


def test_select_queries_is_seeded(tasks):
    first = select_queries(tasks, 4, seed=1, step=3)
    assert first == select_queries(tasks, 4, seed=1, step=3)
    assert len({query.id for query in first}) == 4
    assert select_queries(tasks, 4, seed=1, step=4) != first
    assert len(select_queries(tasks[:2], 5, seed=1, step=1)) == 5


def test_warm_start_lowers_demonstration_nll(tasks, tiny_train_config):
    params = PolicyParams.zeros(MODCHAIN_VOCAB, tiny_train_config.policy)
    history = warm_start(params, tasks, tiny_train_config)
    assert len(history) == tiny_train_config.warmup_steps
    assert history[-1] < history[0]
    assert warm_start(params, tasks, replace(tiny_train_config, warmup_steps=0)) == []


def test_run_writes_the_run_directory(tmp_path, tasks, tiny_train_config):
    run_dir = str(tmp_path / "run")
    state = run(_config(tiny_train_config), run_dir, tasks)
    assert state.step == 2
    events = read_events(events_path(run_dir))
    assert [event["step"] for event in events] == [1, 2]
    assert "wall_clock" not in events[0]
    for event in events:
        assert 0.0 <= event["mean_reward"] <= 1.0
        assert 0.0 <= event["retention_ratio"] <= 1.0
        assert event["validated"] <= event["candidates"]
        # one inner epoch: every update starts at the snapshot
        assert event["clipped_fraction"] == 0.0
    with open(metrics_csv_path(run_dir), encoding="utf-8") as handle:
        assert handle.readline().strip() == ",".join(EVENT_COLUMNS)
    assert os.path.exists(resolved_config_path(run_dir))
    assert latest_checkpoint(run_dir)[0] == 2
    assert torch.equal(checkpoint_load(latest_checkpoint(run_dir)[1]).params.weights, state.params.weights)


def test_zero_lambda_is_plain_grpo(tmp_path, tasks, tiny_train_config):
    plain = replace(tiny_train_config, lambda_mel=0.0)
    silent = replace(tiny_train_config, lambda_mel=0.0, analyst=AnalystConfig(backend="none"))
    first = run(_config(plain), str(tmp_path / "a"), tasks)
    second = run(_config(silent), str(tmp_path / "b"), tasks)
    assert _read(events_path(str(tmp_path / "a"))) == _read(events_path(str(tmp_path / "b")))
    assert torch.equal(first.params.weights, second.params.weights)
    assert len(first.pool) == 0
    assert not os.path.exists(pool_path(str(tmp_path / "a")))


def test_resume_matches_an_uninterrupted_run(tmp_path, tasks, tiny_train_config):
    full = replace(tiny_train_config, total_steps=3)
    straight = run(_config(full), str(tmp_path / "straight"), tasks)

    resumed_dir = str(tmp_path / "resumed")
    run(_config(replace(full, total_steps=2)), resumed_dir, tasks)
    resumed = run(_config(full), resumed_dir, tasks)

    assert resumed.step == 3
    assert torch.equal(resumed.params.weights, straight.params.weights)
    assert _read(events_path(resumed_dir)) == _read(events_path(str(tmp_path / "straight")))
    if os.path.exists(pool_path(resumed_dir)):
        assert _read(pool_path(resumed_dir)) == _read(pool_path(str(tmp_path / "straight")))


def test_fresh_run_discards_stale_state(tmp_path, tasks, tiny_train_config):
    run_dir = str(tmp_path / "run")
    run(_config(replace(tiny_train_config, total_steps=3)), run_dir, tasks)
    run(_config(tiny_train_config), run_dir, tasks, resume=False)
    assert [event["step"] for event in read_events(events_path(run_dir))] == [1, 2]
    assert latest_checkpoint(run_dir)[0] == 2


def test_workers_do_not_change_the_result(tasks, tiny_train_config):
    states = []
    for workers in (1, 3):
        state = TrainState.fresh(MODCHAIN_VOCAB, tiny_train_config.policy, tiny_train_config.seed)
        warm_start(state.params, tasks, tiny_train_config)
        config = replace(tiny_train_config, workers=workers)
        event = train_step(state, config, tasks, analyst=ScriptedAnalyst())
        states.append((state, event))
    (first, first_event), (second, second_event) = states
    assert torch.equal(first.params.weights, second.params.weights)
    assert first_event.to_record(include_wall_clock=False) == second_event.to_record(include_wall_clock=False)


def _memorizing_state(query, config):
    state = TrainState.fresh(MODCHAIN_VOCAB, config.policy, config.seed)
    warm_start(state.params, [query], replace(config, warmup_steps=300, warmup_learning_rate=0.5, warmup_demos=1))
    state.snapshot = state.params.snapshot()
    return state


def _group(query):
    good = solution_tokens(query)
    bad = [*MODCHAIN_VOCAB.tokenize("1: 2\n2: 4\n#### 4"), MODCHAIN_VOCAB.eos_id]
    trajectories = (
        build_trajectory(MODCHAIN_VOCAB, good, [-0.1] * len(good), f"{query.id}:1:0"),
        build_trajectory(MODCHAIN_VOCAB, bad, [-0.1] * len(bad), f"{query.id}:1:1"),
    )
    return RolloutGroup(query.id, query.prompt_tokens, trajectories, (1, 0))


def test_validated_meta_experiences_form_the_batch(chain_query, tiny_train_config):
    state = _memorizing_state(chain_query, tiny_train_config)
    result = construct_meta_experiences(
        state, tiny_train_config, [_group(chain_query)], [chain_query], ScriptedAnalyst(), step=1
    )
    assert result.pairs == 1
    assert [me.status for me in result.entries] == ["validated"]
    assert len(result.batch) == 1
    entry = result.batch.entries[0]
    assert MODCHAIN_VOCAB.decode(entry.target) == "[HINT] <wrong-op> - <apply-op> [/HINT]"
    assert entry.context[0] == MODCHAIN_VOCAB.id("<analyze>")
    assert state.pool.counters()["validated"] == 1


class _BrokenAnalyst:
    name = "remote"

    def analyze(self, pair, query, step):
        raise AnalystTransportError("unreachable", status_code=502)


def test_analyst_failures_never_escape_a_step(chain_query, tiny_train_config):
    state = _memorizing_state(chain_query, tiny_train_config)
    result = construct_meta_experiences(
        state, tiny_train_config, [_group(chain_query)], [chain_query], _BrokenAnalyst(), step=1
    )
    assert result.analyst_failures == 1
    assert result.entries == [] and result.batch is None
    assert len(state.pool) == 0


def test_unserializable_entries_are_rejected_not_raised(chain_query, tiny_train_config):
    config = replace(tiny_train_config, serialization="natural-language")
    state = _memorizing_state(chain_query, config)
    result = construct_meta_experiences(state, config, [_group(chain_query)], [chain_query], ScriptedAnalyst(), step=1)
    assert [me.status for me in result.entries] == ["rejected"]
    assert result.entries[0].diagnostics.startswith("serialization failed")
    assert result.batch is None
    assert state.pool.counters()["rejected"] == 1


def test_natural_language_run_completes(tmp_path, tasks, tiny_train_config):
    config = _config(replace(tiny_train_config, serialization="natural-language"))
    state = run(config, str(tmp_path / "run"), tasks)
    assert state.step == 2
    assert state.pool.counters()["validated"] == 0
    assert all(event["mel_skipped"] for event in read_events(events_path(str(tmp_path / "run"))))


def _instrumented_step(monkeypatch, state, config, query, analyst):
    """One step on a fixed mixed group; records every applied update and every meta-gradient batch."""
    applied, batches = [], []
    original_ascend = PolicyParams.ascend
    original_meta = trainer.meta_gradient

    def ascend(self, gradient, learning_rate):
        applied.append(gradient.clone())
        original_ascend(self, gradient, learning_rate)

    def meta(params, batch):
        batches.append(batch)
        return original_meta(params, batch)

    monkeypatch.setattr(PolicyParams, "ascend", ascend)
    monkeypatch.setattr(trainer, "meta_gradient", meta)
    monkeypatch.setattr(trainer, "rollout_group", lambda *args, **kwargs: _group(query))
    before = state.params.copy()
    train_step(state, config, [query], analyst=analyst)
    grpo = grpo_gradient(before, state.snapshot, [_group(query)], config.clip).gradient
    return applied, grpo, batches, before


def test_joint_update_is_grpo_plus_weighted_meta_gradient(monkeypatch, chain_query, tiny_train_config):
    config = replace(tiny_train_config, queries_per_step=1, lambda_mel=0.5)
    state = _memorizing_state(chain_query, config)
    applied, grpo, batches, before = _instrumented_step(monkeypatch, state, config, chain_query, ScriptedAnalyst())
    assert len(applied) == 1
    assert len(batches) == 1 and len(batches[0]) == 1
    expected = grpo + 0.5 * meta_gradient(before, batches[0])
    assert torch.allclose(applied[0], expected, rtol=0.0, atol=1e-12)
    assert not torch.allclose(applied[0], grpo, rtol=0.0, atol=1e-12)


def test_joint_update_is_grpo_when_nothing_validates(monkeypatch, chain_query, tiny_train_config):
    config = replace(tiny_train_config, queries_per_step=1)
    state = _memorizing_state(chain_query, config)
    applied, grpo, batches, _ = _instrumented_step(monkeypatch, state, config, chain_query, _BrokenAnalyst())
    assert batches == []
    assert len(applied) == 1
    assert torch.equal(applied[0], grpo)


def test_default_step_size_raises_the_expected_training_reward(tmp_path):
    tasks = generate_tasks("modchain", 8, 0, (1, 1), moduli=(3,))
    train = TrainConfig(
        group_size=8,
        queries_per_step=8,
        total_steps=30,
        checkpoint_interval=30,
        lambda_mel=0.0,
        analyst=AnalystConfig(backend="none"),
        warmup_steps=10,
        warmup_demos=8,
        decoding=DecodingConfig(temperature=1.0, max_tokens=16),
    )
    sampled = EvalConfig(k=32, temperature_k=1.0, max_tokens=16)
    start = TrainState.fresh(MODCHAIN_VOCAB, train.policy, train.seed)
    warm_start(start.params, tasks, train)
    before = evaluate(start.params, tasks, sampled, seed=0).avg_at_k

    state = run(_config(train), str(tmp_path / "run"), tasks)
    after = evaluate(state.params, tasks, sampled, seed=0).avg_at_k
    assert after > before


def test_validated_only_pool_file_keeps_full_counters(tmp_path, tasks, tiny_train_config):
    full_dir, lean_dir = str(tmp_path / "all"), str(tmp_path / "validated")
    full = run(_config(tiny_train_config), full_dir, tasks)
    lean = run(_config(replace(tiny_train_config, pool_persist="validated")), lean_dir, tasks)
    assert torch.equal(full.params.weights, lean.params.weights)
    assert _read(events_path(full_dir)) == _read(events_path(lean_dir))

    records = read_pool(pool_path(lean_dir)) if os.path.exists(pool_path(lean_dir)) else []
    assert all(entry.status == "validated" for entry in records)
    assert len(records) == lean.pool.validated
    assert pool_inspect(lean_dir)["counters"] == lean.pool.counters()
    assert pool_inspect(full_dir)["counters"] == full.pool.counters()
