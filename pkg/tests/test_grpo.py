import itertools
from fractions import Fraction

import pytest
import torch

from mel.config import ClipConfig, DecodingConfig, FeatureSpec
from mel.errors import ContractError
from mel.grpo import (
    RolloutGroup,
    clipped_surrogate,
    grpo_gradient,
    importance_ratios,
    normalize_advantages,
    rollout_group,
)
from mel.policy import PolicyParams, featurizer_for, log_prob_grad, sequence_log_prob
from mel.taskenv import build_trajectory
from mel.vocab import MODCHAIN_VOCAB

SPEC = FeatureSpec(window=3, phase_cap=4)


def _random_params(seed, scale=0.3):
    featurizer = featurizer_for(MODCHAIN_VOCAB, SPEC)
    gen = torch.Generator().manual_seed(seed)
    weights = torch.randn(featurizer.num_features, MODCHAIN_VOCAB.size, generator=gen, dtype=torch.float64) * scale
    return PolicyParams(MODCHAIN_VOCAB, SPEC, weights)


def _group(query, texts, rewards, prompt=None):
    trajectories = []
    for index, text in enumerate(texts):
        tokens = [*MODCHAIN_VOCAB.tokenize(text), MODCHAIN_VOCAB.eos_id]
        trajectories.append(build_trajectory(MODCHAIN_VOCAB, tokens, [-1.0] * len(tokens), f"{query.id}:1:{index}"))
    return RolloutGroup(
        query_id=query.id,
        prompt_tokens=prompt or query.prompt_tokens,
        trajectories=tuple(trajectories),
        rewards=tuple(rewards),
    )


def test_advantage_examples():
    assert normalize_advantages([1, 1, 0, 0]).values == pytest.approx([1, 1, -1, -1], abs=1e-5)
    skewed = normalize_advantages([1, 0, 0, 0]).values
    assert skewed == pytest.approx([3**0.5, -(3**-0.5), -(3**-0.5), -(3**-0.5)], abs=1e-5)
    degenerate = normalize_advantages([1, 1, 1, 1])
    assert degenerate.degenerate and degenerate.values == (0.0,) * 4
    with pytest.raises(ContractError):
        normalize_advantages([1])


def test_advantages_standardize_every_binary_pattern():
    for rewards in itertools.product((0, 1), repeat=8):
        result = normalize_advantages(list(rewards))
        if len(set(rewards)) == 1:
            assert result.degenerate and all(v == 0.0 for v in result.values)
            continue
        values = torch.tensor(result.values, dtype=torch.float64)
        assert abs(float(values.mean())) < 1e-9
        # the 1e-6 stabilizer shrinks the variance by at most ~2e-6 / std
        assert abs(float(values.var(unbiased=False)) - 1.0) < 1e-5
        positives = sum(rewards)
        mean = Fraction(positives, 8)
        std = float(mean * (1 - mean)) ** 0.5
        assert result.values[rewards.index(1)] == pytest.approx(float(1 - mean) / (std + 1e-6), abs=1e-12)


def test_clipped_surrogate_examples():
    result = clipped_surrogate(torch.tensor([1.5, 0.5, 1.0]), torch.tensor([1.0, 1.0, 1.0]), 0.2)
    assert result.value == pytest.approx((1.2 + 0.5 + 1.0) / 3)
    assert result.weights.tolist() == pytest.approx([0.0, 0.5, 1.0])
    assert result.clipped == 1

    negative = clipped_surrogate(torch.tensor([0.5]), torch.tensor([-1.0]), 0.2)
    assert negative.value == pytest.approx(-0.8)
    assert negative.weights.tolist() == [0.0]

    inside = clipped_surrogate(torch.tensor([1.0]), torch.tensor([0.7]), 0.2)
    assert inside.value == pytest.approx(0.7)
    assert inside.clipped == 0

    with pytest.raises(ContractError):
        clipped_surrogate(torch.tensor([1.0, 1.0]), torch.tensor([1.0]), 0.2)


def test_importance_ratios_are_one_at_the_snapshot(chain_query):
    params = _random_params(1)
    group = _group(chain_query, ["1: 2\n2: 0\n#### 0"], [1])
    ratios = importance_ratios(params, params.snapshot(), group.prompt_tokens, group.trajectories[0])
    assert torch.allclose(ratios, torch.ones_like(ratios), atol=1e-12)

    moved = params.copy()
    moved.ascend(log_prob_grad(params, group.prompt_tokens, group.trajectories[0].tokens), 0.5)
    ratios = importance_ratios(moved, params.snapshot(), group.prompt_tokens, group.trajectories[0])
    old = sequence_log_prob(params, group.prompt_tokens, group.trajectories[0].tokens)
    new = sequence_log_prob(moved, group.prompt_tokens, group.trajectories[0].tokens)
    assert torch.allclose(torch.log(ratios), new - old, atol=1e-10)
    assert float(ratios.prod()) > 1.0


def test_degenerate_groups_contribute_nothing(chain_query):
    params = _random_params(2)
    groups = [_group(chain_query, ["#### 0", "1: 2\n#### 0"], [1, 1]), _group(chain_query, ["#### 1", "#### 3"], [0, 0])]
    result = grpo_gradient(params, params.snapshot(), groups, ClipConfig())
    assert float(result.gradient.abs().sum()) == 0.0
    assert result.degenerate_groups == 2
    assert result.objective == 0.0


def _reinforce(params, groups):
    gradient = torch.zeros_like(params.weights)
    for group in groups:
        advantages = normalize_advantages(group.rewards).values
        for advantage, trajectory in zip(advantages, group.trajectories):
            direction = log_prob_grad(params, group.prompt_tokens, trajectory.tokens)
            gradient += direction * (advantage / len(trajectory)) / (group.size * len(groups))
    return gradient


def test_gradient_at_snapshot_is_reinforce(chain_query):
    for seed in range(5):
        params = _random_params(10 + seed)
        groups = [
            _group(chain_query, ["1: 2\n2: 0\n#### 0", "1: 2\n2: 4\n#### 4", "#### 0", "2: 1"], [1, 0, 1, 0]),
            _group(chain_query, ["1: 3\n#### 3", "1: 2\n2: 0\n#### 0", "#### 2"], [0, 1, 0]),
        ]
        result = grpo_gradient(params, params.snapshot(), groups, ClipConfig())
        assert result.clipped_tokens == 0
        assert torch.allclose(result.gradient, _reinforce(params, groups), atol=1e-10)


def _surrogate_value(weights, snapshot, groups, config):
    params = PolicyParams(MODCHAIN_VOCAB, SPEC, weights)
    return grpo_gradient(params, snapshot, groups, config).objective


def test_surrogate_gradient_matches_finite_differences(chain_query):
    h = 1e-5
    params = _random_params(21)
    snapshot = params.snapshot()
    groups = [_group(chain_query, ["1: 2\n2: 0\n#### 0", "1: 4\n#### 4", "#### 1"], [1, 0, 0])]
    config = ClipConfig()
    gradient = grpo_gradient(params, snapshot, groups, config).gradient
    gen = torch.Generator().manual_seed(5)
    for _ in range(20):
        direction = torch.randn(params.weights.shape, generator=gen, dtype=torch.float64)
        numeric = (
            _surrogate_value(params.weights + h * direction, snapshot, groups, config)
            - _surrogate_value(params.weights - h * direction, snapshot, groups, config)
        ) / (2 * h)
        analytic = float((gradient * direction).sum())
        assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(analytic))


def test_kl_penalty_vanishes_at_the_snapshot(chain_query):
    params = _random_params(3)
    groups = [_group(chain_query, ["#### 0", "#### 1"], [1, 0])]
    plain = grpo_gradient(params, params.snapshot(), groups, ClipConfig())
    penalized = grpo_gradient(params, params.snapshot(), groups, ClipConfig(kl_coef=0.5))
    assert penalized.kl == pytest.approx(0.0, abs=1e-12)
    assert torch.allclose(plain.gradient, penalized.gradient, atol=1e-12)


def test_clipping_activates_after_a_large_step(chain_query):
    params = _random_params(4)
    snapshot = params.snapshot()
    groups = [_group(chain_query, ["1: 2\n2: 0\n#### 0", "#### 3"], [1, 0])]
    config = ClipConfig(epsilon=0.2)
    first = grpo_gradient(params, snapshot, groups, config)
    assert first.clipped_tokens == 0
    params.ascend(first.gradient, 200.0)
    second = grpo_gradient(params, snapshot, groups, config)
    assert second.clipped_tokens > 0
    assert 0.0 < second.clipped_fraction <= 1.0


def test_rollout_group_is_reproducible(chain_query):
    params = PolicyParams.zeros(MODCHAIN_VOCAB, SPEC)
    snapshot = params.snapshot()
    config = DecodingConfig(temperature=1.0, max_tokens=6, seed=9)
    first = rollout_group(params, snapshot, chain_query, 4, config, step=2)
    second = rollout_group(params, snapshot, chain_query, 4, config, step=2)
    assert [t.tokens for t in first.trajectories] == [t.tokens for t in second.trajectories]
    assert [t.trajectory_id for t in first.trajectories] == [f"{chain_query.id}:2:{i}" for i in range(4)]
    assert sorted(first.positives + first.negatives) == [0, 1, 2, 3]
    other = rollout_group(params, snapshot, chain_query, 4, config, step=3)
    assert [t.tokens for t in other.trajectories] != [t.tokens for t in first.trajectories]
    with pytest.raises(ContractError):
        rollout_group(params, snapshot, chain_query, 1, config)
    foreign = PolicyParams.zeros(MODCHAIN_VOCAB, FeatureSpec(window=2)).snapshot()
    with pytest.raises(ContractError):
        rollout_group(params, foreign, chain_query, 2, config)


def test_rollout_group_samples_the_snapshot_not_the_live_params(chain_query):
    params = _random_params(4)
    snapshot = params.snapshot()
    config = DecodingConfig(temperature=1.0, max_tokens=6, seed=1)
    before = rollout_group(params, snapshot, chain_query, 3, config, step=1)
    params.ascend(torch.ones_like(params.weights), 5.0)
    after = rollout_group(params, snapshot, chain_query, 3, config, step=1)
    assert [t.tokens for t in after.trajectories] == [t.tokens for t in before.trajectories]


def test_greedy_duplicates_form_a_degenerate_group(chain_query):
    params = PolicyParams.zeros(MODCHAIN_VOCAB, SPEC)
    group = rollout_group(params, None, chain_query, 2, DecodingConfig(temperature=0, max_tokens=4))
    assert group.trajectories[0].tokens == group.trajectories[1].tokens
    assert group.degenerate
