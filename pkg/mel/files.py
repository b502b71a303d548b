from __future__ import annotations

import hashlib
import json
import os
from typing import Any, Iterable, Iterator


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dump_json_line(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as handle:
        handle.write(data)
    os.replace(tmp_path, path)


def write_jsonl(path: str, records: Iterable[dict[str, Any]]) -> int:
    lines = [dump_json_line(record) for record in records]
    body = "".join(line + "\n" for line in lines)
    write_atomic(path, body.encode("utf-8"))
    return len(lines)


def append_jsonl(path: str, record: dict[str, Any]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(dump_json_line(record) + "\n")


class JsonlDecodeError(ValueError):
    def __init__(self, line_no: int, detail: str):
        super().__init__(f"line {line_no}: {detail}")
        self.line_no = line_no
        self.detail = detail


def iter_jsonl(path: str) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (line_no, record) pairs; blank lines are skipped."""
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                record = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise JsonlDecodeError(line_no, exc.msg) from exc
            if not isinstance(record, dict):
                raise JsonlDecodeError(line_no, "expected an object")
            yield line_no, record


def write_json(path: str, payload: dict[str, Any]) -> None:
    body = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    write_atomic(path, body.encode("utf-8"))
