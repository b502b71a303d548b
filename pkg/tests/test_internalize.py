import math

import pytest
import torch

from mel.config import FeatureSpec
from mel.errors import ContractError
from mel.internalize import (
    InternalizationBatch,
    InternalizationEntry,
    meta_gradient,
    meta_return,
    nll_loss,
    retrospective_context,
)
from mel.metaexp import ContrastivePair, ScriptedAnalyst, serialize_meta_experience
from mel.policy import PolicyParams, PolicySnapshot, featurizer_for, log_prob_grad
from mel.taskenv import build_trajectory
from mel.vocab import MODCHAIN_VOCAB

SPEC = FeatureSpec(window=3, phase_cap=4)


def _trajectory(text, trajectory_id):
    tokens = [*MODCHAIN_VOCAB.tokenize(text), MODCHAIN_VOCAB.eos_id]
    return build_trajectory(MODCHAIN_VOCAB, tokens, [-1.0] * len(tokens), trajectory_id)


def _validated(query, negative_text, suffix="1"):
    pair = ContrastivePair(
        query.id,
        _trajectory("1: 2\n2: 0\n#### 0", f"{query.id}:{suffix}:0"),
        _trajectory(negative_text, f"{query.id}:{suffix}:1"),
    )
    me = ScriptedAnalyst().analyze(pair, query, step=1).transition("validated")
    context = retrospective_context(MODCHAIN_VOCAB, query.prompt_tokens, pair.positive.tokens, pair.negative.tokens)
    return me, context, serialize_meta_experience(me, "hint-tokens", MODCHAIN_VOCAB)


def _random_params(seed):
    featurizer = featurizer_for(MODCHAIN_VOCAB, SPEC)
    gen = torch.Generator().manual_seed(seed)
    weights = torch.randn(featurizer.num_features, MODCHAIN_VOCAB.size, generator=gen, dtype=torch.float64) * 0.4
    return PolicyParams(MODCHAIN_VOCAB, SPEC, weights)


def test_retrospective_context_layout():
    context = retrospective_context(MODCHAIN_VOCAB, (1, 2), (3,), (4, 5))
    sep = MODCHAIN_VOCAB.id("<sep>")
    assert context.tokens == (MODCHAIN_VOCAB.id("<analyze>"), sep, 1, 2, sep, 3, sep, 4, 5, sep)


def test_only_validated_entries_are_internalized(chain_query):
    me, context, target = _validated(chain_query, "1: 2\n2: 4\n#### 4")
    batch = InternalizationBatch.build([(me, context, target)])
    assert len(batch) == 1
    candidate = ScriptedAnalyst().analyze(
        ContrastivePair(chain_query.id, _trajectory("#### 0", "p"), _trajectory("#### 1", "n")), chain_query, step=1
    )
    with pytest.raises(ContractError):
        InternalizationBatch.build([(candidate, context, target)])
    with pytest.raises(ContractError):
        nll_loss(_random_params(0), InternalizationBatch(()))
    with pytest.raises(ContractError):
        meta_gradient(_random_params(0), InternalizationBatch((InternalizationEntry("x", (1,), ()),)))


def test_zero_policy_loss_is_log_vocab(chain_query):
    params = PolicyParams.zeros(MODCHAIN_VOCAB, SPEC)
    batch = InternalizationBatch.build([_validated(chain_query, "1: 2\n2: 4\n#### 4")])
    assert nll_loss(params, batch) == pytest.approx(math.log(MODCHAIN_VOCAB.size), abs=1e-12)
    assert meta_return(params, batch) == pytest.approx(-math.log(MODCHAIN_VOCAB.size), abs=1e-12)


def _constant_reward_oracle(params, batch):
    # REINFORCE with reward 1 on the target, token-averaged and batch-averaged
    gradient = torch.zeros_like(params.weights)
    for entry in batch.entries:
        for t, token in enumerate(entry.target):
            context = list(entry.context) + list(entry.target[:t])
            gradient += log_prob_grad(params, context, [token]) * (1.0 / len(entry.target))
    return gradient / len(batch)


def test_meta_gradient_equals_a_constant_reward_policy_gradient(chain_query):
    negatives = ["1: 2\n2: 4\n#### 4", "1: 2\n2: 3\n#### 3", "1: 7\n2: 0\n#### 0", "1: 2\n2: 0\n#### 3"]
    for seed in range(10):
        params = _random_params(seed)
        items = [_validated(chain_query, text, str(i)) for i, text in enumerate(negatives[: 1 + seed % 4])]
        batch = InternalizationBatch.build(items)
        assert torch.allclose(meta_gradient(params, batch), _constant_reward_oracle(params, batch), atol=1e-10)


def test_meta_gradient_is_the_gradient_of_meta_return(chain_query):
    h = 1e-5
    params = _random_params(42)
    batch = InternalizationBatch.build(
        [_validated(chain_query, "1: 2\n2: 4\n#### 4", "a"), _validated(chain_query, "#### 1", "b")]
    )
    gradient = meta_gradient(params, batch)
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        direction = torch.randn(params.weights.shape, generator=gen, dtype=torch.float64)
        plus = PolicySnapshot(MODCHAIN_VOCAB, SPEC, params.weights + h * direction)
        minus = PolicySnapshot(MODCHAIN_VOCAB, SPEC, params.weights - h * direction)
        numeric = (meta_return(plus, batch) - meta_return(minus, batch)) / (2 * h)
        analytic = float((gradient * direction).sum())
        assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(analytic))


def test_ascending_the_meta_gradient_lowers_the_loss(chain_query):
    params = _random_params(7)
    batch = InternalizationBatch.build([_validated(chain_query, "1: 2\n2: 4\n#### 4")])
    before = nll_loss(params, batch)
    params.ascend(meta_gradient(params, batch), 0.5)
    assert nll_loss(params, batch) < before


def test_duplicated_entries_leave_the_loss_unchanged(chain_query):
    params = _random_params(3)
    items = [_validated(chain_query, "1: 2\n2: 4\n#### 4", "a"), _validated(chain_query, "#### 1", "b")]
    single = InternalizationBatch.build(items)
    doubled = InternalizationBatch(single.entries + single.entries)
    assert nll_loss(params, doubled) == pytest.approx(nll_loss(params, single), abs=1e-12)
    assert torch.allclose(meta_gradient(params, doubled), meta_gradient(params, single), rtol=0.0, atol=1e-12)


def test_loss_depends_on_which_trajectory_is_negative(chain_query):
    params = _random_params(11)
    me, context, target = _validated(chain_query, "1: 2\n2: 4\n#### 4")
    swapped = retrospective_context(MODCHAIN_VOCAB, context.prompt, context.negative, context.positive)
    assert swapped.tokens != context.tokens
    original = nll_loss(params, InternalizationBatch.build([(me, context, target)]))
    reordered = nll_loss(params, InternalizationBatch.build([(me, swapped, target)]))
    assert abs(original - reordered) > 1e-9
