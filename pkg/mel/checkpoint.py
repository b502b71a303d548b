"""Line-delimited checkpoint files.

Layout: one header record, then ``param`` / ``snapshot`` weight triples and ``pool``
entries. The header carries a sha256 of everything after it, so a truncated or
edited file is refused before any state is built.
"""

from __future__ import annotations

import json
import os
import re
from typing import Any

from .config import FeatureSpec
from .errors import CheckpointError
from .files import dump_json_line, sha256_bytes, write_atomic
from .metaexp import MetaExperience, MetaExperiencePool
from .paths import checkpoints_dir
from .policy import PolicyParams, PolicySnapshot, params_records, weights_from_records
from .state import TrainState
from .vocab import Vocabulary

CHECKPOINT_FORMAT = "mel-checkpoint"
CHECKPOINT_VERSION = 1

_STEP_NAME = re.compile(r"^step-(\d+)$")


def _body_lines(state: TrainState) -> list[str]:
    lines = [dump_json_line({"kind": "param", **record}) for record in params_records(state.params)]
    if state.snapshot is not None:
        lines.extend(dump_json_line({"kind": "snapshot", **record}) for record in params_records(state.snapshot))
    lines.extend(dump_json_line({"kind": "pool", "entry": record}) for record in state.pool.records())
    return lines


def checkpoint_bytes(state: TrainState) -> bytes:
    body = "".join(line + "\n" for line in _body_lines(state)).encode("utf-8")
    header = {
        "kind": "header",
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "seed": state.seed,
        "feature_spec": state.params.spec.to_dict(),
        "vocab": list(state.params.vocab.tokens),
        "has_snapshot": state.snapshot is not None,
        "totals": state.totals,
        "checksum": sha256_bytes(body),
    }
    return (dump_json_line(header) + "\n").encode("utf-8") + body


def checkpoint_save(state: TrainState, path: str) -> None:
    try:
        write_atomic(path, checkpoint_bytes(state))
    except OSError as exc:
        raise CheckpointError(path, f"cannot write checkpoint: {exc}") from exc


def checkpoint_load(path: str) -> TrainState:
    """Build a new state from ``path``; nothing existing is touched on failure."""
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise CheckpointError(path, f"cannot read checkpoint: {exc}") from exc
    head, newline, body = raw.partition(b"\n")
    if not newline:
        raise CheckpointError(path, "missing header")
    try:
        header = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(path, f"unreadable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(path, "not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            path, f"unsupported checkpoint version {header.get('version')!r}; this build reads {CHECKPOINT_VERSION}"
        )
    if sha256_bytes(body) != header.get("checksum"):
        raise CheckpointError(path, "checksum mismatch; file is corrupted or truncated")

    try:
        vocab = Vocabulary(tuple(header["vocab"]))
        spec = FeatureSpec.from_dict(header["feature_spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(path, f"bad header: {exc}") from exc

    params: list[dict[str, Any]] = []
    snapshot: list[dict[str, Any]] = []
    entries: list[MetaExperience] = []
    for line_no, line in enumerate(body.decode("utf-8").splitlines(), start=2):
        try:
            record = json.loads(line)
            kind = record["kind"]
            if kind == "param":
                params.append(record)
            elif kind == "snapshot":
                snapshot.append(record)
            elif kind == "pool":
                entries.append(MetaExperience.from_record(record["entry"]))
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(path, f"line {line_no}: {exc}") from exc

    source = path
    state = TrainState(
        step=int(header["step"]),
        seed=int(header["seed"]),
        params=PolicyParams(vocab=vocab, spec=spec, weights=weights_from_records(vocab, spec, params, source=source)),
        snapshot=(
            PolicySnapshot(vocab=vocab, spec=spec, weights=weights_from_records(vocab, spec, snapshot, source=source))
            if header.get("has_snapshot")
            else None
        ),
        pool=MetaExperiencePool(entries),
        totals=dict(header.get("totals", {})),
    )
    return state


def list_checkpoints(run_dir: str) -> list[tuple[int, str]]:
    directory = checkpoints_dir(run_dir)
    if not os.path.isdir(directory):
        return []
    found = []
    for name in os.listdir(directory):
        match = _STEP_NAME.match(name)
        if match:
            found.append((int(match.group(1)), os.path.join(directory, name)))
    return sorted(found)


def latest_checkpoint(run_dir: str) -> tuple[int, str] | None:
    found = list_checkpoints(run_dir)
    return found[-1] if found else None
