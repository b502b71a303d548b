from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ContractError
from .metaexp import MetaExperience
from .policy import Policy, log_prob_grad, sequence_log_prob
from .vocab import ANALYZE, SEP, Vocabulary


def instruction_tokens(vocab: Vocabulary) -> tuple[int, ...]:
    return (vocab.id(ANALYZE),)


@dataclass(frozen=True)
class RetrospectiveContext:
    instruction: tuple[int, ...]
    prompt: tuple[int, ...]
    positive: tuple[int, ...]
    negative: tuple[int, ...]
    separator: int

    @property
    def tokens(self) -> tuple[int, ...]:
        """``I <sep> x <sep> y+ <sep> y- <sep>``; the trailing separator opens the target."""
        sep = (self.separator,)
        return self.instruction + sep + self.prompt + sep + self.positive + sep + self.negative + sep


def retrospective_context(
    vocab: Vocabulary,
    prompt: Sequence[int],
    positive: Sequence[int],
    negative: Sequence[int],
    instruction: Sequence[int] | None = None,
) -> RetrospectiveContext:
    return RetrospectiveContext(
        instruction=tuple(instruction if instruction is not None else instruction_tokens(vocab)),
        prompt=tuple(prompt),
        positive=tuple(positive),
        negative=tuple(negative),
        separator=vocab.id(SEP),
    )


@dataclass(frozen=True)
class InternalizationEntry:
    meta_experience_id: str
    context: tuple[int, ...]
    target: tuple[int, ...]


@dataclass(frozen=True)
class InternalizationBatch:
    entries: tuple[InternalizationEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @staticmethod
    def build(items: Sequence[tuple[MetaExperience, RetrospectiveContext, Sequence[int]]]) -> "InternalizationBatch":
        entries = []
        for me, context, target in items:
            if me.status != "validated":
                raise ContractError(f"{me.id} is {me.status}; only validated meta-experiences are internalized")
            entries.append(InternalizationEntry(me.id, context.tokens, tuple(target)))
        return InternalizationBatch(tuple(entries))


def _check(batch: InternalizationBatch) -> None:
    if not batch.entries:
        raise ContractError("internalization batch is empty")
    if any(not entry.target for entry in batch.entries):
        raise ContractError("every meta-experience target must be non-empty")


def nll_loss(params: Policy, batch: InternalizationBatch) -> float:
    """Mean over entries of the token-averaged negative log-likelihood of the target."""
    _check(batch)
    per_entry = [-float(sequence_log_prob(params, e.context, e.target).mean()) for e in batch.entries]
    return sum(per_entry) / len(per_entry)


def meta_return(params: Policy, batch: InternalizationBatch) -> float:
    return -nll_loss(params, batch)


def meta_gradient(params: Policy, batch: InternalizationBatch) -> torch.Tensor:
    _check(batch)
    gradient = torch.zeros_like(params.weights)
    for entry in batch.entries:
        gradient += log_prob_grad(params, entry.context, entry.target) / len(entry.target)
    return gradient / len(batch.entries)
