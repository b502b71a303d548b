from dataclasses import replace

import pytest

from mel.config import EvalConfig, MelConfig, TaskConfig
from mel.errors import ContractError
from mel.operations import evaluate_run, experiment, pool_inspect, run_status, steps_to_reach, train_run


@pytest.fixture
def config(tiny_train_config):
    return MelConfig(
        task=TaskConfig(count=12, min_steps=1, max_steps=2, heldout_count=4),
        train=tiny_train_config,
        eval=EvalConfig(k=2, max_tokens=14, seeds=(0,)),
    )


def test_steps_to_reach_uses_a_trailing_mean():
    rewards = [0.0, 0.2, 0.6, 0.6, 0.9]
    assert steps_to_reach(rewards, 0.5, window=1) == 3
    assert steps_to_reach(rewards, 0.5, window=2) == 4
    assert steps_to_reach(rewards, 0.95, window=1) is None
    assert steps_to_reach([], 0.1) is None


def test_train_then_inspect(tmp_path, config):
    run_dir = str(tmp_path / "run")
    summary = train_run(config, run_dir)
    assert summary["steps"] == 2
    assert summary["last_event"]["step"] == 2

    status = run_status(run_dir)
    assert status["steps"] == 2
    assert status["latest_checkpoint"]["step"] == 2

    report = evaluate_run(config, run_dir)
    assert len(report["reports"]) == 1
    assert report["reports"][0]["tasks"] == 4

    pool = pool_inspect(run_dir, limit=1)
    assert pool["counters"]["candidates"] == pool["matched"]
    assert len(pool["entries"]) <= 1
    with pytest.raises(ContractError):
        pool_inspect(run_dir, status="pending")


def test_experiment_trains_both_arms(tmp_path, config):
    result = experiment(replace(config, train=replace(config.train, total_steps=1)), str(tmp_path), [0])
    assert result["seeds"] == [0]
    entry = result["per_seed"][0]
    assert set(entry["steps_to_baseline_reward"]) == {"grpo", "mel"}
    assert entry["steps_to_baseline_reward"]["grpo"] == 1
    assert sum(result["wins"].values()) == 1
    assert (tmp_path / "seed-0" / "grpo").is_dir()
    assert (tmp_path / "seed-0" / "mel").is_dir()
    with pytest.raises(ContractError):
        experiment(config, str(tmp_path), [])
