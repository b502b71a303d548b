from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import SerializationError

BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
NEWLINE = "<nl>"
ANALYZE = "<analyze>"
MOD = "mod"
COLON = ":"
ANSWER_MARKER = "####"
HINT_OPEN = "[HINT]"
HINT_CLOSE = "[/HINT]"

DIGITS = tuple(str(d) for d in range(10))
OPERATORS = ("+", "-", "*")

ERROR_KINDS = ("wrong-operation", "arithmetic-slip", "wrong-modulus", "format-violation")

ERROR_KIND_TOKENS = {
    "wrong-operation": "<wrong-op>",
    "arithmetic-slip": "<slip>",
    "wrong-modulus": "<wrong-mod>",
    "format-violation": "<format>",
}

CORRECTIVE_TOKENS = {
    "wrong-operation": "<apply-op>",
    "arithmetic-slip": "<recompute>",
    "wrong-modulus": "<reduce>",
    "format-violation": "<reformat>",
}

REQUIRED_TOKENS = (BOS, EOS, ANSWER_MARKER, HINT_OPEN, HINT_CLOSE)
_SILENT = {BOS, EOS}


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _pattern: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        missing = [token for token in REQUIRED_TOKENS if token not in self.tokens]
        if missing:
            raise ValueError(f"vocabulary is missing required tokens: {missing}")
        index = {token: idx for idx, token in enumerate(self.tokens)}
        alternatives = sorted((t for t in self.tokens if t != NEWLINE), key=len, reverse=True)
        pattern = re.compile("|".join(re.escape(t) for t in alternatives))
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_pattern", pattern)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def get(self, token: str) -> int | None:
        return self._index.get(token)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise SerializationError(f"symbol {token!r} is not in the vocabulary", symbol=token) from None

    def text(self, token_id: int) -> str:
        return self.tokens[token_id]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def hint_ids(self) -> tuple[int, ...]:
        """Ids whose presence in a context marks injected hint material."""
        names = [HINT_OPEN, HINT_CLOSE, *ERROR_KIND_TOKENS.values(), *CORRECTIVE_TOKENS.values()]
        return tuple(self._index[name] for name in names if name in self._index)

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.id(symbol) for symbol in symbols]

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        newline = self.get(NEWLINE)
        pos = 0
        while pos < len(text):
            char = text[pos]
            if char == "\n":
                if newline is None:
                    raise SerializationError("newline is not in the vocabulary", symbol="\\n")
                ids.append(newline)
                pos += 1
                continue
            if char.isspace():
                pos += 1
                continue
            match = self._pattern.match(text, pos)
            if match is None:
                symbol = re.match(r"\S+", text[pos:]).group(0)
                raise SerializationError(f"symbol {symbol!r} is not in the vocabulary", symbol=symbol)
            ids.append(self._index[match.group(0)])
            pos = match.end()
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        parts: list[str] = []
        previous: str | None = None
        for token_id in ids:
            token = self.tokens[token_id]
            if token in _SILENT:
                continue
            if token == NEWLINE:
                parts.append("\n")
            elif not parts or previous == NEWLINE:
                parts.append(token)
            elif token.isdigit() and previous is not None and previous.isdigit():
                parts.append(token)
            else:
                parts.append(" " + token)
            previous = token
        return "".join(parts)


def modchain_vocabulary() -> Vocabulary:
    tokens = (
        BOS,
        EOS,
        SEP,
        NEWLINE,
        ANALYZE,
        MOD,
        COLON,
        ANSWER_MARKER,
        HINT_OPEN,
        HINT_CLOSE,
        *OPERATORS,
        *DIGITS,
        *ERROR_KIND_TOKENS.values(),
        *CORRECTIVE_TOKENS.values(),
    )
    return Vocabulary(tokens=tokens)


MODCHAIN_VOCAB = modchain_vocabulary()
