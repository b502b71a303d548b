from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Protocol, Sequence

import torch

from .errors import ConfigError, ContractError, TaskFileError
from .files import JsonlDecodeError, iter_jsonl, write_jsonl
from .rng import stream
from .vocab import ANSWER_MARKER, MODCHAIN_VOCAB, NEWLINE, OPERATORS, Vocabulary

TASK_FAMILIES = ("modchain",)
DEFAULT_MODULI = (3, 5, 7)

_STEP_LINE = re.compile(r"^\s*(\d+)\s*:\s*(\d+)\s*$")
_ANSWER_VALUE = re.compile(r"^\d+$")


@dataclass(frozen=True)
class Query:
    id: str
    family: str
    operands: tuple[int, ...]
    ops: tuple[str, ...]
    modulus: int
    ground_truth: int
    prompt_tokens: tuple[int, ...]

    @property
    def prompt_text(self) -> str:
        return render_prompt_text(self.operands, self.ops, self.modulus)

    @property
    def chain_length(self) -> int:
        return len(self.ops)

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "family": self.family,
            "operands": list(self.operands),
            "ops": list(self.ops),
            "modulus": self.modulus,
            "ground_truth": self.ground_truth,
            "prompt": self.prompt_text,
        }

    @staticmethod
    def from_record(data: dict[str, Any], vocab: Vocabulary = MODCHAIN_VOCAB) -> "Query":
        operands = tuple(int(item) for item in data["operands"])
        ops = tuple(str(item) for item in data["ops"])
        modulus = int(data["modulus"])
        return make_query(str(data["id"]), str(data["family"]), operands, ops, modulus, vocab)


@dataclass(frozen=True)
class StepRecord:
    index: int
    text: str
    value: int | None
    start: int
    end: int


@dataclass(frozen=True)
class Trajectory:
    trajectory_id: str
    tokens: tuple[int, ...]
    text: str
    steps: tuple[StepRecord, ...]
    final_answer: int | None
    token_log_probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.token_log_probs):
            raise ContractError("token_log_probs must have one entry per token")
        if any(lp > 0.0 for lp in self.token_log_probs):
            raise ContractError("token log-probabilities must be <= 0")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class StepOracleReport:
    correct_values: tuple[int, ...]
    first_deviation: int | None
    per_step_correct: tuple[bool, ...]


@dataclass(frozen=True)
class VerificationResult:
    reward: int
    extraction_failed: bool


class Verifier(Protocol):
    def check(self, text: str, ground_truth: int) -> VerificationResult: ...


def extract_final_answer(text: str) -> int | None:
    marker = text.rfind(ANSWER_MARKER)
    if marker < 0:
        return None
    tail = text[marker + len(ANSWER_MARKER) :].strip()
    if not _ANSWER_VALUE.match(tail):
        return None
    return int(tail)


class ModChainVerifier:
    """Integer answer after the last marker; whitespace and leading zeros are ignored."""

    def check(self, text: str, ground_truth: int) -> VerificationResult:
        answer = extract_final_answer(text)
        if answer is None:
            return VerificationResult(reward=0, extraction_failed=True)
        return VerificationResult(reward=int(answer == ground_truth), extraction_failed=False)


DEFAULT_VERIFIER: Verifier = ModChainVerifier()


def apply_op(left: int, op: str, right: int) -> int:
    if op == "+":
        return left + right
    if op == "-":
        return left - right
    if op == "*":
        return left * right
    raise ContractError(f"unknown operator {op!r}")


def chain_values(operands: Sequence[int], ops: Sequence[str], modulus: int) -> list[int]:
    """Reduced prefix values v_1..v_L of a left-to-right chain."""
    if len(operands) != len(ops) + 1:
        raise ContractError("a chain needs exactly one more operand than operators")
    value = operands[0] % modulus
    values: list[int] = []
    for op, operand in zip(ops, operands[1:]):
        value = apply_op(value, op, operand) % modulus
        values.append(value)
    return values


def render_prompt_text(operands: Sequence[int], ops: Sequence[str], modulus: int) -> str:
    parts = [str(operands[0])]
    for op, operand in zip(ops, operands[1:]):
        parts.extend([op, str(operand)])
    parts.extend(["mod", str(modulus)])
    return " ".join(parts)


def encode_prompt(vocab: Vocabulary, text: str) -> tuple[int, ...]:
    return (vocab.bos_id, *vocab.tokenize(text), vocab.id(NEWLINE))


def make_query(
    query_id: str,
    family: str,
    operands: tuple[int, ...],
    ops: tuple[str, ...],
    modulus: int,
    vocab: Vocabulary = MODCHAIN_VOCAB,
) -> Query:
    if family not in TASK_FAMILIES:
        raise ConfigError(f"unknown task family {family!r}")
    if modulus < 2:
        raise ConfigError("modulus must be >= 2")
    if not ops:
        raise ConfigError("a chain needs at least one operator")
    values = chain_values(operands, ops, modulus)
    text = render_prompt_text(operands, ops, modulus)
    return Query(
        id=query_id,
        family=family,
        operands=operands,
        ops=ops,
        modulus=modulus,
        ground_truth=values[-1],
        prompt_tokens=encode_prompt(vocab, text),
    )


def generate_tasks(
    family: str,
    count: int,
    seed: int,
    difficulty: tuple[int, int] = (1, 3),
    *,
    moduli: Sequence[int] = DEFAULT_MODULI,
    vocab: Vocabulary = MODCHAIN_VOCAB,
) -> list[Query]:
    if family not in TASK_FAMILIES:
        raise ConfigError(f"unknown task family {family!r}")
    if count < 1:
        raise ConfigError("count must be >= 1")
    low, high = difficulty
    if low < 1 or high < low:
        raise ConfigError("difficulty must be a non-empty range of chain lengths >= 1")
    if not moduli:
        raise ConfigError("moduli must not be empty")
    gen = stream(seed, "tasks", family)
    queries: list[Query] = []
    for index in range(count):
        length = int(torch.randint(low, high + 1, (1,), generator=gen))
        modulus = int(moduli[int(torch.randint(len(moduli), (1,), generator=gen))])
        operands = tuple(int(v) for v in torch.randint(modulus, (length + 1,), generator=gen).tolist())
        ops = tuple(OPERATORS[int(v)] for v in torch.randint(len(OPERATORS), (length,), generator=gen).tolist())
        queries.append(make_query(f"{family}-{seed}-{index:05d}", family, operands, ops, modulus, vocab))
    return queries


def solution_tokens(query: Query, vocab: Vocabulary = MODCHAIN_VOCAB) -> list[int]:
    """Oracle-correct response for a query, end-of-sequence included."""
    lines = [f"{t}: {value}\n" for t, value in enumerate(chain_values(query.operands, query.ops, query.modulus), 1)]
    text = "".join(lines) + f"{ANSWER_MARKER} {query.ground_truth}"
    return [*vocab.tokenize(text), vocab.eos_id]


def parse_steps(vocab: Vocabulary, tokens: Sequence[int]) -> tuple[tuple[StepRecord, ...], int | None]:
    body = list(tokens)
    if vocab.eos_id in body:
        body = body[: body.index(vocab.eos_id)]
    marker_id = vocab.id(ANSWER_MARKER)
    newline_id = vocab.get(NEWLINE)
    marker_positions = [pos for pos, token in enumerate(body) if token == marker_id]
    step_end = marker_positions[-1] if marker_positions else len(body)
    steps: list[StepRecord] = []
    start = 0
    for pos in range(step_end):
        if body[pos] == newline_id or pos == step_end - 1:
            end = pos + 1
            steps.append(_step_record(vocab, body, len(steps) + 1, start, end))
            start = end
    final_answer = extract_final_answer(vocab.decode(body)) if marker_positions else None
    return tuple(steps), final_answer


def _step_record(vocab: Vocabulary, body: Sequence[int], index: int, start: int, end: int) -> StepRecord:
    text = vocab.decode(body[start:end]).rstrip("\n")
    match = _STEP_LINE.match(text)
    value = None
    if match is not None and int(match.group(1)) == index:
        value = int(match.group(2))
    return StepRecord(index=index, text=text, value=value, start=start, end=end)


def build_trajectory(
    vocab: Vocabulary,
    tokens: Sequence[int],
    token_log_probs: Sequence[float],
    trajectory_id: str = "",
) -> Trajectory:
    steps, final_answer = parse_steps(vocab, tokens)
    return Trajectory(
        trajectory_id=trajectory_id,
        tokens=tuple(int(t) for t in tokens),
        text=vocab.decode(tokens),
        steps=steps,
        final_answer=final_answer,
        token_log_probs=tuple(float(lp) for lp in token_log_probs),
    )


def verify(trajectory: Trajectory, ground_truth: int, verifier: Verifier | None = None) -> VerificationResult:
    return (verifier or DEFAULT_VERIFIER).check(trajectory.text, ground_truth)


def verify_text(text: str, ground_truth: int, verifier: Verifier | None = None) -> VerificationResult:
    return (verifier or DEFAULT_VERIFIER).check(text, ground_truth)


def step_oracle(query: Query, trajectory: Trajectory) -> StepOracleReport:
    correct = chain_values(query.operands, query.ops, query.modulus)
    per_step = tuple(
        index < len(trajectory.steps) and trajectory.steps[index].value == value
        for index, value in enumerate(correct)
    )
    first_deviation = None
    if any(step.value is not None for step in trajectory.steps):
        for index, ok in enumerate(per_step, start=1):
            if not ok:
                first_deviation = index
                break
    return StepOracleReport(correct_values=tuple(correct), first_deviation=first_deviation, per_step_correct=per_step)


def save_task_file(path: str, queries: Sequence[Query]) -> int:
    return write_jsonl(path, (query.to_record() for query in queries))


def load_task_file(path: str, vocab: Vocabulary = MODCHAIN_VOCAB) -> list[Query]:
    queries: list[Query] = []
    try:
        for line_no, record in iter_jsonl(path):
            try:
                query = Query.from_record(record, vocab)
            except (KeyError, TypeError, ValueError) as exc:
                raise TaskFileError(f"{path}:{line_no}: invalid task record: {exc}") from exc
            if "ground_truth" in record and int(record["ground_truth"]) != query.ground_truth:
                raise TaskFileError(f"{path}:{line_no}: ground_truth does not match the chain")
            queries.append(query)
    except JsonlDecodeError as exc:
        raise TaskFileError(f"{path}:{exc.line_no}: {exc.detail}") from exc
    except OSError as exc:
        raise TaskFileError(f"cannot read task file {path}: {exc}") from exc
    return queries


def parse_gen_spec(spec: str) -> dict[str, Any]:
    """Parse ``family=modchain,count=N,seed=S[,min_steps=a,max_steps=b,moduli=3,5,7]``."""
    fields: dict[str, str] = {}
    last_key: str | None = None
    for item in (part.strip() for part in spec.split(",")):
        if not item:
            continue
        key, sep, value = item.partition("=")
        if sep:
            last_key = key.strip()
            fields[last_key] = value.strip()
        elif last_key is not None:
            fields[last_key] = f"{fields[last_key]},{item}"
        else:
            raise ConfigError(f"cannot parse task generation spec {spec!r}")
    known = {"family", "count", "seed", "min_steps", "max_steps", "moduli"}
    unknown = sorted(set(fields) - known)
    if unknown:
        raise ConfigError(f"unknown task generation keys: {', '.join(unknown)}")
    try:
        result: dict[str, Any] = {}
        if "family" in fields:
            result["family"] = fields["family"]
        for key in ("count", "seed"):
            if key in fields:
                result[key] = int(fields[key])
        if "min_steps" in fields or "max_steps" in fields:
            low = int(fields.get("min_steps", fields.get("max_steps")))
            high = int(fields.get("max_steps", fields.get("min_steps")))
            result["difficulty"] = (low, high)
        if "moduli" in fields:
            result["moduli"] = tuple(int(m) for m in fields["moduli"].split(",") if m)
    except ValueError as exc:
        raise ConfigError(f"cannot parse task generation spec {spec!r}: {exc}") from exc
    return result
