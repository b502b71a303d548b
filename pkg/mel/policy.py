"""Log-linear softmax policy over windowed context features.

The parameters are a dense float64 tensor of shape ``(num_features, vocab_size)``.
A context activates a small set of features; the logits are the sum of their rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import accumulate
from typing import Any, Iterable, Sequence, Union

import torch
import torch.nn.functional as F

from .config import DecodingConfig, FeatureSpec
from .errors import CheckpointError, ContractError
from .rng import stream
from .taskenv import Trajectory, build_trajectory
from .vocab import BOS, NEWLINE, SEP, Vocabulary

DTYPE = torch.float64


class ContextFeaturizer:
    """Maps a context to active feature ids and feature ids to stable text keys."""

    def __init__(self, vocab: Vocabulary, spec: FeatureSpec):
        self.vocab_size = vocab.size
        self.spec = spec
        self.hint_ids = vocab.hint_ids if spec.hint else ()
        self._hint_slot = {token: slot for slot, token in enumerate(self.hint_ids)}
        self._boundaries = frozenset(vocab.get(name) for name in (BOS, NEWLINE, SEP) if name in vocab)
        size = self.vocab_size
        self.ngram_offset = 1
        self.bigram_offset = self.ngram_offset + (spec.window * size if spec.ngram else 0)
        self.phase_offset = self.bigram_offset + (size * size if spec.bigram else 0)
        self.hint_offset = self.phase_offset + (spec.phase_cap + 1 if spec.phase else 0)
        self.num_features = self.hint_offset + len(self.hint_ids)

    def features(self, context: Sequence[int]) -> list[int]:
        spec = self.spec
        size = self.vocab_size
        active = [0]
        if spec.ngram:
            for k in range(1, min(spec.window, len(context)) + 1):
                active.append(self.ngram_offset + (k - 1) * size + context[-k])
        if spec.bigram and len(context) >= 2:
            active.append(self.bigram_offset + context[-2] * size + context[-1])
        if spec.phase:
            since = 0
            for token in reversed(context):
                if token in self._boundaries:
                    break
                since += 1
            active.append(self.phase_offset + min(since, spec.phase_cap))
        if self.hint_ids:
            scope = context if spec.hint_window is None else context[len(context) - spec.hint_window :]
            present = sorted({self._hint_slot[token] for token in scope if token in self._hint_slot})
            active.extend(self.hint_offset + slot for slot in present)
        return active

    def key(self, feature: int) -> str:
        size = self.vocab_size
        if feature == 0:
            return "bias"
        if feature < self.bigram_offset:
            k, token = divmod(feature - self.ngram_offset, size)
            return f"ngram:{k + 1}:{token}"
        if feature < self.phase_offset:
            first, second = divmod(feature - self.bigram_offset, size)
            return f"bigram:{first}:{second}"
        if feature < self.hint_offset:
            return f"phase:{feature - self.phase_offset}"
        if feature < self.num_features:
            return f"hint:{self.hint_ids[feature - self.hint_offset]}"
        raise ContractError(f"feature id {feature} out of range")

    def feature_of(self, key: str) -> int:
        kind, _, rest = key.partition(":")
        parts = [int(part) for part in rest.split(":")] if rest else []
        size = self.vocab_size
        if kind == "bias" and not parts:
            return 0
        if kind == "ngram" and self.spec.ngram and len(parts) == 2 and 1 <= parts[0] <= self.spec.window:
            return self.ngram_offset + (parts[0] - 1) * size + parts[1]
        if kind == "bigram" and self.spec.bigram and len(parts) == 2:
            return self.bigram_offset + parts[0] * size + parts[1]
        if kind == "phase" and self.spec.phase and len(parts) == 1 and parts[0] <= self.spec.phase_cap:
            return self.phase_offset + parts[0]
        if kind == "hint" and len(parts) == 1 and parts[0] in self._hint_slot:
            return self.hint_offset + self._hint_slot[parts[0]]
        raise ContractError(f"unknown feature key {key!r}")


@lru_cache(maxsize=32)
def featurizer_for(vocab: Vocabulary, spec: FeatureSpec) -> ContextFeaturizer:
    return ContextFeaturizer(vocab, spec)


@dataclass
class PolicyParams:
    vocab: Vocabulary
    spec: FeatureSpec
    weights: torch.Tensor

    def __post_init__(self) -> None:
        expected = (featurizer_for(self.vocab, self.spec).num_features, self.vocab.size)
        if tuple(self.weights.shape) != expected:
            raise ContractError(f"weights must have shape {expected}, got {tuple(self.weights.shape)}")
        self.weights = self.weights.to(DTYPE)

    @classmethod
    def zeros(cls, vocab: Vocabulary, spec: FeatureSpec) -> "PolicyParams":
        featurizer = featurizer_for(vocab, spec)
        return cls(vocab=vocab, spec=spec, weights=torch.zeros(featurizer.num_features, vocab.size, dtype=DTYPE))

    @property
    def featurizer(self) -> ContextFeaturizer:
        return featurizer_for(self.vocab, self.spec)

    def snapshot(self) -> "PolicySnapshot":
        return PolicySnapshot(vocab=self.vocab, spec=self.spec, weights=self.weights.clone())

    def copy(self) -> "PolicyParams":
        return PolicyParams(vocab=self.vocab, spec=self.spec, weights=self.weights.clone())

    def ascend(self, gradient: torch.Tensor, learning_rate: float) -> None:
        updated = self.weights + learning_rate * gradient
        if not bool(torch.isfinite(updated).all()):
            raise ContractError("update would make policy weights non-finite")
        self.weights = updated


@dataclass(frozen=True)
class PolicySnapshot:
    """Frozen copy of the weights taken at rollout time."""

    vocab: Vocabulary
    spec: FeatureSpec
    weights: torch.Tensor = field(repr=False)

    @property
    def featurizer(self) -> ContextFeaturizer:
        return featurizer_for(self.vocab, self.spec)

    def thaw(self) -> PolicyParams:
        return PolicyParams(vocab=self.vocab, spec=self.spec, weights=self.weights.clone())


Policy = Union[PolicyParams, PolicySnapshot]


def _batch_logits(policy: Policy, contexts: Iterable[Sequence[int]]) -> tuple[torch.Tensor, list[list[int]]]:
    featurizer = policy.featurizer
    active = [featurizer.features(context) for context in contexts]
    flat = torch.tensor([f for feats in active for f in feats], dtype=torch.long)
    offsets = torch.tensor([0, *accumulate(len(feats) for feats in active[:-1])], dtype=torch.long)
    scores = F.embedding_bag(flat, policy.weights, offsets, mode="sum")
    return scores, active


def logits(policy: Policy, context: Sequence[int]) -> torch.Tensor:
    if not context:
        raise ContractError("context must contain at least the begin marker")
    scores, _ = _batch_logits(policy, [context])
    return scores[0]


def token_distribution(policy: Policy, context: Sequence[int], temperature: float = 1.0) -> torch.Tensor:
    scores = logits(policy, context)
    if temperature == 0:
        probs = torch.zeros_like(scores)
        probs[int(torch.argmax(scores))] = 1.0
        return probs
    return torch.softmax(scores / temperature, dim=0)


def _prefix_contexts(context: Sequence[int], target: Sequence[int]) -> list[list[int]]:
    base = list(context)
    return [base + list(target[:t]) for t in range(len(target))]


def sequence_log_prob(policy: Policy, context: Sequence[int], target: Sequence[int]) -> torch.Tensor:
    if not target:
        raise ContractError("target must be non-empty")
    if not context:
        raise ContractError("context must contain at least the begin marker")
    scores, _ = _batch_logits(policy, _prefix_contexts(context, target))
    index = torch.tensor(list(target), dtype=torch.long).unsqueeze(1)
    return torch.log_softmax(scores, dim=1).gather(1, index).squeeze(1)


def log_prob_grad(
    policy: Policy,
    context: Sequence[int],
    target: Sequence[int],
    coefficients: Sequence[float] | torch.Tensor | None = None,
) -> torch.Tensor:
    """Gradient of ``sum_t c_t * log pi(target_t | context ++ target_<t)``; ``c_t`` defaults to 1."""
    if not target:
        raise ContractError("target must be non-empty")
    if not context:
        raise ContractError("context must contain at least the begin marker")
    scores, active = _batch_logits(policy, _prefix_contexts(context, target))
    index = torch.tensor(list(target), dtype=torch.long)
    delta = F.one_hot(index, policy.vocab.size).to(DTYPE) - torch.softmax(scores, dim=1)
    if coefficients is not None:
        coef = torch.as_tensor(coefficients, dtype=DTYPE)
        if coef.shape != (len(target),):
            raise ContractError("coefficients must have one entry per target token")
        delta = delta * coef.unsqueeze(1)
    counts = torch.tensor([len(feats) for feats in active], dtype=torch.long)
    rows = torch.repeat_interleave(delta, counts, dim=0)
    feature_ids = torch.tensor([f for feats in active for f in feats], dtype=torch.long)
    grad = torch.zeros_like(policy.weights)
    grad.index_add_(0, feature_ids, rows)
    return grad


def zero_gradient(policy: Policy) -> torch.Tensor:
    return torch.zeros_like(policy.weights)


def gradient_norm(gradient: torch.Tensor) -> float:
    return float(torch.linalg.vector_norm(gradient))


def sample(
    policy: Policy,
    prompt: Sequence[int],
    config: DecodingConfig,
    *,
    generator: torch.Generator | None = None,
    trajectory_id: str = "",
) -> Trajectory:
    """Decode one response; log-probabilities are always recorded at temperature 1."""
    if config.max_tokens < 1:
        raise ContractError("max_tokens must be >= 1")
    gen = generator if generator is not None else stream(config.seed, "sample")
    context = list(prompt)
    tokens: list[int] = []
    log_probs: list[float] = []
    eos = policy.vocab.eos_id
    for _ in range(config.max_tokens):
        scores = logits(policy, context)
        if config.temperature == 0:
            token = int(torch.argmax(scores))
        else:
            probs = torch.softmax(scores / config.temperature, dim=0)
            token = int(torch.multinomial(probs, 1, generator=gen))
        log_probs.append(min(0.0, float(torch.log_softmax(scores, dim=0)[token])))
        tokens.append(token)
        context.append(token)
        if token == eos:
            break
    return build_trajectory(policy.vocab, tokens, log_probs, trajectory_id)


def params_records(policy: Policy) -> list[dict[str, Any]]:
    """Nonzero weights as ``{"key", "token", "weight"}`` records in feature-major order."""
    featurizer = policy.featurizer
    nonzero = torch.nonzero(policy.weights, as_tuple=False).tolist()
    return [
        {"key": featurizer.key(row), "token": col, "weight": float(policy.weights[row, col])}
        for row, col in nonzero
    ]


def weights_from_records(
    vocab: Vocabulary, spec: FeatureSpec, records: Iterable[dict[str, Any]], *, source: str = "<records>"
) -> torch.Tensor:
    featurizer = featurizer_for(vocab, spec)
    weights = torch.zeros(featurizer.num_features, vocab.size, dtype=DTYPE)
    for record in records:
        try:
            row = featurizer.feature_of(str(record["key"]))
            col = int(record["token"])
            value = float(record["weight"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(source, f"bad weight record {record!r}: {exc}") from exc
        if not 0 <= col < vocab.size or not math.isfinite(value):
            raise CheckpointError(source, f"bad weight record {record!r}")
        weights[row, col] = value
    return weights
