"""Contrastive pairs, meta-experience records, the scripted analyst and replay validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any, Iterable, Protocol, Sequence

import torch

from .config import DecodingConfig, ReplayConfig
from .errors import AnalystTransportError, ContractError, SerializationError
from .files import iter_jsonl, write_jsonl
from .grpo import RolloutGroup
from .policy import Policy, sample
from .rng import stream
from .taskenv import Query, Trajectory, apply_op, chain_values, step_oracle, verify, verify_text
from .vocab import (
    ANSWER_MARKER,
    CORRECTIVE_TOKENS,
    ERROR_KIND_TOKENS,
    ERROR_KINDS,
    HINT_CLOSE,
    HINT_OPEN,
    OPERATORS,
    Vocabulary,
)

logger = logging.getLogger(__name__)

STATUSES = ("candidate", "validated", "rejected")
STEP_FAMILIES = (*OPERATORS, ANSWER_MARKER)

_KIND_BY_TOKEN = {token: kind for kind, token in ERROR_KIND_TOKENS.items()}
_CORRECTIVE_BY_TOKEN = {token: kind for kind, token in CORRECTIVE_TOKENS.items()}

_OP_NAMES = {"+": "addition", "-": "subtraction", "*": "multiplication", ANSWER_MARKER: "the final answer"}

_RULES = {
    "wrong-operation": "apply exactly the operator written in the question at this position",
    "arithmetic-slip": "recompute the operation on the previous value before writing the result",
    "wrong-modulus": "reduce the result modulo m so the value lies in [0, m)",
    "format-violation": "write every step as 't: v' on its own line and finish with '#### v'",
}


@dataclass(frozen=True)
class ContrastivePair:
    query_id: str
    positive: Trajectory
    negative: Trajectory


@dataclass(frozen=True)
class Bifurcation:
    index: int | None
    text: str
    at_answer: bool = False


@dataclass(frozen=True)
class Critique:
    error_kind: str
    attribution: str


@dataclass(frozen=True)
class Heuristic:
    family: str
    corrective: str
    trigger: str
    rule: str

    @property
    def text(self) -> str:
        return f"{self.trigger}, {self.rule}."


@dataclass(frozen=True)
class Provenance:
    query_id: str
    positive_id: str
    negative_id: str
    backend: str
    step: int


@dataclass(frozen=True)
class MetaExperience:
    id: str
    bifurcation: Bifurcation
    critique: Critique
    heuristic: Heuristic
    provenance: Provenance
    question: str
    positive_text: str
    negative_text: str
    status: str = "candidate"
    diagnostics: str | None = None

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ContractError(f"unknown status {self.status!r}")
        if self.critique.error_kind not in ERROR_KINDS:
            raise ContractError(f"unknown error kind {self.critique.error_kind!r}")
        if self.heuristic.family not in STEP_FAMILIES:
            raise ContractError(f"unknown step family {self.heuristic.family!r}")

    def transition(self, status: str, diagnostics: str | None = None) -> "MetaExperience":
        if self.status != "candidate" or status not in ("validated", "rejected"):
            raise ContractError(f"cannot move a {self.status} meta-experience to {status}")
        return replace(self, status=status, diagnostics=diagnostics or self.diagnostics)

    def hint_symbols(self) -> list[str]:
        return [
            HINT_OPEN,
            ERROR_KIND_TOKENS[self.critique.error_kind],
            self.heuristic.family,
            CORRECTIVE_TOKENS[self.heuristic.corrective],
            HINT_CLOSE,
        ]

    def natural_language(self) -> str:
        return f"{self.critique.attribution}\n{self.heuristic.text}"

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "status": self.status,
            "diagnostics": self.diagnostics,
            "bifurcation": {
                "index": self.bifurcation.index,
                "text": self.bifurcation.text,
                "at_answer": self.bifurcation.at_answer,
            },
            "critique": {"error_kind": self.critique.error_kind, "attribution": self.critique.attribution},
            "heuristic": {
                "family": self.heuristic.family,
                "corrective": self.heuristic.corrective,
                "trigger": self.heuristic.trigger,
                "rule": self.heuristic.rule,
            },
            "provenance": {
                "query_id": self.provenance.query_id,
                "positive_id": self.provenance.positive_id,
                "negative_id": self.provenance.negative_id,
                "backend": self.provenance.backend,
                "step": self.provenance.step,
            },
            "question": self.question,
            "positive_text": self.positive_text,
            "negative_text": self.negative_text,
        }

    @staticmethod
    def from_record(data: dict[str, Any]) -> "MetaExperience":
        bif = data["bifurcation"]
        crit = data["critique"]
        heur = data["heuristic"]
        prov = data["provenance"]
        return MetaExperience(
            id=str(data["id"]),
            status=str(data["status"]),
            diagnostics=data.get("diagnostics"),
            bifurcation=Bifurcation(
                index=None if bif["index"] is None else int(bif["index"]),
                text=str(bif["text"]),
                at_answer=bool(bif.get("at_answer", False)),
            ),
            critique=Critique(error_kind=str(crit["error_kind"]), attribution=str(crit["attribution"])),
            heuristic=Heuristic(
                family=str(heur["family"]),
                corrective=str(heur["corrective"]),
                trigger=str(heur["trigger"]),
                rule=str(heur["rule"]),
            ),
            provenance=Provenance(
                query_id=str(prov["query_id"]),
                positive_id=str(prov["positive_id"]),
                negative_id=str(prov["negative_id"]),
                backend=str(prov["backend"]),
                step=int(prov["step"]),
            ),
            question=str(data["question"]),
            positive_text=str(data["positive_text"]),
            negative_text=str(data["negative_text"]),
        )


class MetaExperiencePool:
    """Owns every meta-experience produced by a run; rejected entries are kept."""

    def __init__(self, entries: Iterable[MetaExperience] = ()) -> None:
        self._entries: list[MetaExperience] = []
        self._positions: dict[str, int] = {}
        for entry in entries:
            self.add(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def entries(self) -> list[MetaExperience]:
        return list(self._entries)

    def add(self, entry: MetaExperience) -> None:
        if entry.id in self._positions:
            raise ContractError(f"duplicate meta-experience id {entry.id!r}")
        self._positions[entry.id] = len(self._entries)
        self._entries.append(entry)

    def update(self, entry: MetaExperience) -> None:
        position = self._positions.get(entry.id)
        if position is None:
            raise ContractError(f"unknown meta-experience id {entry.id!r}")
        current = self._entries[position]
        if current.status != "candidate" and current.status != entry.status:
            raise ContractError(f"{entry.id} is already {current.status}")
        self._entries[position] = entry

    def get(self, entry_id: str) -> MetaExperience | None:
        position = self._positions.get(entry_id)
        return None if position is None else self._entries[position]

    def with_status(self, status: str | None = None, *, step: int | None = None) -> list[MetaExperience]:
        return [
            entry
            for entry in self._entries
            if (status is None or entry.status == status) and (step is None or entry.provenance.step == step)
        ]

    @property
    def candidates(self) -> int:
        return len(self._entries)

    @property
    def validated(self) -> int:
        return sum(1 for entry in self._entries if entry.status == "validated")

    @property
    def rejected(self) -> int:
        return sum(1 for entry in self._entries if entry.status == "rejected")

    @property
    def retention_ratio(self) -> float:
        validated = self.validated
        return validated / max(1, validated + self.rejected)

    def counters(self) -> dict[str, Any]:
        return {
            "candidates": self.candidates,
            "validated": self.validated,
            "rejected": self.rejected,
            "retention_ratio": self.retention_ratio,
        }

    def truncate(self, step: int) -> "MetaExperiencePool":
        return MetaExperiencePool(entry for entry in self._entries if entry.provenance.step <= step)

    def records(self) -> list[dict[str, Any]]:
        return [entry.to_record() for entry in self._entries]

    def save(self, path: str) -> int:
        return write_jsonl(path, self.records())

    @classmethod
    def from_records(cls, records: Iterable[dict[str, Any]]) -> "MetaExperiencePool":
        return cls(MetaExperience.from_record(record) for record in records)

    @classmethod
    def load(cls, path: str) -> "MetaExperiencePool":
        return cls.from_records(record for _, record in iter_jsonl(path))


def build_pairs(group: RolloutGroup, cap: int, seed: int) -> list[ContrastivePair]:
    """Seeded matching of positives to negatives, up to ``cap`` pairs.

    Sides are shuffled and zipped first so no trajectory repeats while that is
    possible; leftover slots come from the shuffled cross product.
    """
    if cap < 1:
        raise ContractError("pair cap must be >= 1")
    positives = group.positives
    negatives = group.negatives
    if not positives or not negatives:
        return []
    total = len(positives) * len(negatives)
    if cap >= total:
        chosen = [(p, n) for p in positives for n in negatives]
    else:
        gen = stream(seed, "pairs", group.query_id)
        pos_order = [positives[i] for i in torch.randperm(len(positives), generator=gen).tolist()]
        neg_order = [negatives[i] for i in torch.randperm(len(negatives), generator=gen).tolist()]
        chosen = list(zip(pos_order, neg_order))[:cap]
        if len(chosen) < cap:
            used = set(chosen)
            for flat in torch.randperm(total, generator=gen).tolist():
                candidate = (positives[flat // len(negatives)], negatives[flat % len(negatives)])
                if candidate not in used:
                    chosen.append(candidate)
                    used.add(candidate)
                    if len(chosen) == cap:
                        break
    return [
        ContrastivePair(
            query_id=group.query_id,
            positive=group.trajectories[p],
            negative=group.trajectories[n],
        )
        for p, n in chosen
    ]


def classify_value(value: int | None, previous: int, op: str, operand: int, modulus: int) -> str:
    if value is None:
        return "format-violation"
    unreduced = apply_op(previous, op, operand)
    if value >= modulus or value == unreduced:
        return "wrong-modulus"
    for other in OPERATORS:
        if other != op and value == apply_op(previous, other, operand) % modulus:
            return "wrong-operation"
    return "arithmetic-slip"


def locate_bifurcation(query: Query, negative: Trajectory) -> Bifurcation:
    report = step_oracle(query, negative)
    index = report.first_deviation
    if index is None:
        return Bifurcation(index=None, text=_answer_text(negative), at_answer=True)
    text = negative.steps[index - 1].text if index <= len(negative.steps) else ""
    return Bifurcation(index=index, text=text, at_answer=False)


def _answer_text(trajectory: Trajectory) -> str:
    marker = trajectory.text.rfind(ANSWER_MARKER)
    return trajectory.text[marker:].strip() if marker >= 0 else ""


def critique(query: Query, negative: Trajectory, bifurcation: Bifurcation) -> tuple[Critique, str]:
    """Error kind and attribution at the bifurcation, plus the step family it belongs to."""
    correct = chain_values(query.operands, query.ops, query.modulus)
    if bifurcation.at_answer:
        position = len(correct)
        value = negative.final_answer
        family = ANSWER_MARKER
        where = "the final answer"
    else:
        position = bifurcation.index
        step = negative.steps[position - 1] if position <= len(negative.steps) else None
        value = step.value if step is not None else None
        family = query.ops[position - 1]
        where = f"step {position}"
    previous = correct[position - 2] if position >= 2 else query.operands[0] % query.modulus
    op = query.ops[position - 1]
    operand = query.operands[position]
    kind = classify_value(value, previous, op, operand, query.modulus)
    wrote = "nothing parseable" if value is None else str(value)
    attribution = (
        f"At {where} the chain computes {previous} {op} {operand} mod {query.modulus} = {correct[position - 1]}, "
        f"but the failed solution wrote {wrote} ({kind})."
    )
    return Critique(error_kind=kind, attribution=attribution), family


def abstract_heuristic(critique_: Critique, family: str) -> Heuristic:
    trigger = f"When {_OP_NAMES[family]} appears in a modular chain"
    return Heuristic(family=family, corrective=critique_.error_kind, trigger=trigger, rule=_RULES[critique_.error_kind])


def meta_experience_id(pair: ContrastivePair) -> str:
    return f"{pair.negative.trajectory_id}>{pair.positive.trajectory_id}"


class Analyst(Protocol):
    name: str

    def analyze(self, pair: ContrastivePair, query: Query, step: int) -> MetaExperience: ...


class ScriptedAnalyst:
    """Oracle-backed analyst: bifurcation, critique and heuristic in three separate stages."""

    name = "scripted"

    def analyze(self, pair: ContrastivePair, query: Query, step: int) -> MetaExperience:
        return analyze(pair, query, step=step, backend=self.name)


def analyze(
    pair: ContrastivePair,
    query: Query,
    *,
    step: int = 0,
    backend: str = "scripted",
    attribution: str | None = None,
    heuristic_text: str | None = None,
    status: str = "candidate",
    diagnostics: str | None = None,
) -> MetaExperience:
    if pair.query_id != query.id:
        raise ContractError("pair and query refer to different tasks")
    bifurcation = locate_bifurcation(query, pair.negative)
    crit, family = critique(query, pair.negative, bifurcation)
    heuristic = abstract_heuristic(crit, family)
    if attribution is not None:
        crit = replace(crit, attribution=attribution)
    if heuristic_text is not None:
        heuristic = replace(heuristic, rule=heuristic_text)
    return MetaExperience(
        id=meta_experience_id(pair),
        bifurcation=bifurcation,
        critique=crit,
        heuristic=heuristic,
        provenance=Provenance(
            query_id=query.id,
            positive_id=pair.positive.trajectory_id,
            negative_id=pair.negative.trajectory_id,
            backend=backend,
            step=step,
        ),
        question=query.prompt_text,
        positive_text=pair.positive.text,
        negative_text=pair.negative.text,
        status=status,
        diagnostics=diagnostics,
    )


def serialize_meta_experience(me: MetaExperience, mode: str, vocab: Vocabulary) -> list[int]:
    if mode == "hint-tokens":
        return vocab.encode(me.hint_symbols())
    if mode == "natural-language":
        return vocab.tokenize(me.natural_language())
    raise ContractError(f"unknown serialization mode {mode!r}")


def parse_hint_tokens(vocab: Vocabulary, ids: Sequence[int]) -> tuple[str, str, str]:
    """Inverse of hint-token serialization: ``(error kind, step family, corrective kind)``."""
    symbols = [vocab.text(token) for token in ids]
    if len(symbols) != 5 or symbols[0] != HINT_OPEN or symbols[-1] != HINT_CLOSE:
        raise SerializationError(f"malformed hint sequence {' '.join(symbols)!r}")
    kind = _KIND_BY_TOKEN.get(symbols[1])
    corrective = _CORRECTIVE_BY_TOKEN.get(symbols[3])
    if kind is None:
        raise SerializationError(f"unknown error-kind token {symbols[1]!r}", symbol=symbols[1])
    if symbols[2] not in STEP_FAMILIES:
        raise SerializationError(f"unknown step family {symbols[2]!r}", symbol=symbols[2])
    if corrective is None:
        raise SerializationError(f"unknown corrective token {symbols[3]!r}", symbol=symbols[3])
    return kind, symbols[2], corrective


def replay_prompt(me: MetaExperience, query: Query, vocab: Vocabulary) -> list[int]:
    """Query prompt with the hint tokens injected right after the begin marker."""
    return [query.prompt_tokens[0], *vocab.encode(me.hint_symbols()), *query.prompt_tokens[1:]]


class RemoteReplayer(Protocol):
    def replay_texts(self, me: MetaExperience, query: Query, attempts: int, temperature: float) -> list[str]: ...


def validate_by_replay(
    me: MetaExperience,
    query: Query,
    params: Policy,
    config: ReplayConfig,
    *,
    run_seed: int = 0,
    remote: RemoteReplayer | None = None,
) -> MetaExperience:
    """Re-attempt the query with the meta-experience injected; validated iff any attempt passes."""
    if me.status != "candidate":
        raise ContractError(f"only candidates can be replayed, {me.id} is {me.status}")
    if remote is not None:
        try:
            texts = remote.replay_texts(me, query, config.attempts, config.temperature)
        except AnalystTransportError as exc:
            logger.warning("replay transport failed for %s: %s", me.id, exc)
            return me.transition("rejected", f"replay transport failure: {exc}")
        passed = any(verify_text(text, query.ground_truth).reward == 1 for text in texts)
    else:
        prompt = replay_prompt(me, query, params.vocab)
        decoding = DecodingConfig(temperature=config.temperature, max_tokens=config.max_tokens, seed=run_seed)
        passed = False
        for attempt in range(config.attempts):
            gen = stream(run_seed, "replay", me.id, attempt)
            trajectory = sample(params, prompt, decoding, generator=gen, trajectory_id=f"{me.id}:replay:{attempt}")
            if verify(trajectory, query.ground_truth).reward == 1:
                passed = True
                break
    return me.transition("validated" if passed else "rejected")
