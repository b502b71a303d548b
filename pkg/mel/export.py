from __future__ import annotations

import csv
import io
import logging
import os
from collections import Counter
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analyst import analysis_instruction
from .errors import ContractError, EventLogError
from .files import JsonlDecodeError, iter_jsonl, write_atomic, write_json, write_jsonl
from .metaexp import MetaExperience
from .paths import (
    curves_svg_path,
    events_path,
    internalization_dataset_path,
    metrics_csv_path,
    pool_path,
    pool_summary_path,
)
from .state import EVENT_COLUMNS

logger = logging.getLogger(__name__)

EXPORT_KINDS = ("metrics-csv", "curves-svg", "pool-summary", "internalization-dataset")


def read_events(path: str) -> list[dict[str, Any]]:
    records: list[dict[str, Any]] = []
    previous = 0
    try:
        for line_no, record in iter_jsonl(path):
            step = record.get("step")
            if not isinstance(step, int) or isinstance(step, bool):
                raise EventLogError(path, line_no, "record has no integer step")
            if step <= previous:
                raise EventLogError(path, line_no, f"step {step} does not increase")
            previous = step
            records.append(record)
    except JsonlDecodeError as exc:
        raise EventLogError(path, exc.line_no, exc.detail) from exc
    except FileNotFoundError as exc:
        raise EventLogError(path, 0, "event log not found") from exc
    return records


def read_pool(path: str) -> list[MetaExperience]:
    if not os.path.exists(path):
        return []
    entries = []
    try:
        for line_no, record in iter_jsonl(path):
            try:
                entries.append(MetaExperience.from_record(record))
            except (KeyError, TypeError, ValueError) as exc:
                raise EventLogError(path, line_no, f"bad pool record: {exc}") from exc
    except JsonlDecodeError as exc:
        raise EventLogError(path, exc.line_no, exc.detail) from exc
    return entries


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv_text(events: list[dict[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(EVENT_COLUMNS)
    for event in events:
        writer.writerow([_cell(event.get(column)) for column in EVENT_COLUMNS])
    return buffer.getvalue()


def write_curves_svg(events: list[dict[str, Any]], path: str) -> None:
    steps = [event["step"] for event in events]
    plt.rcParams["svg.hashsalt"] = "mel"
    fig, (reward_ax, retention_ax) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    try:
        reward_ax.plot(steps, [event.get("mean_reward", 0.0) for event in events], color="tab:blue")
        reward_ax.set_ylabel("mean reward")
        reward_ax.set_ylim(0.0, 1.0)
        reward_ax.grid(alpha=0.3)
        retention_ax.plot(steps, [event.get("retention_ratio", 0.0) for event in events], color="tab:green")
        retention_ax.set_ylabel("retention ratio")
        retention_ax.set_ylim(0.0, 1.0)
        retention_ax.set_xlabel("step")
        retention_ax.grid(alpha=0.3)
        fig.tight_layout()
        buffer = io.BytesIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    write_atomic(path, buffer.getvalue())


def pool_summary(entries: list[MetaExperience], events: list[dict[str, Any]]) -> dict[str, Any]:
    statuses = Counter(entry.status for entry in entries)
    by_kind: dict[str, dict[str, int]] = {}
    for entry in entries:
        row = by_kind.setdefault(entry.critique.error_kind, {"candidate": 0, "validated": 0, "rejected": 0})
        row[entry.status] += 1
    retention = [event.get("retention_ratio", 0.0) for event in events]
    validated = statuses.get("validated", 0)
    judged = validated + statuses.get("rejected", 0)
    return {
        "entries": len(entries),
        "statuses": dict(sorted(statuses.items())),
        "error_kinds": dict(sorted(by_kind.items())),
        "backends": dict(sorted(Counter(entry.provenance.backend for entry in entries).items())),
        "retention_ratio": retention[-1] if retention else validated / max(1, judged),
        "final_retention_ratio": retention[-1] if retention else None,
        "retention_series": retention,
    }


def internalization_records(entries: list[MetaExperience], instruction: str) -> list[dict[str, Any]]:
    return [
        {
            "id": entry.id,
            "instruction": instruction,
            "question": entry.question,
            "positive": entry.positive_text,
            "negative": entry.negative_text,
            "target": entry.natural_language(),
            "hint": " ".join(entry.hint_symbols()),
        }
        for entry in entries
        if entry.status == "validated"
    ]


def export_run(run_dir: str, what: str, *, output: str | None = None, template_version: str = "v1") -> str:
    """Write one export artifact for a run directory and return its path."""
    if what not in EXPORT_KINDS:
        raise ContractError(f"unknown export {what!r}; expected one of {', '.join(EXPORT_KINDS)}")
    if what == "metrics-csv":
        path = output or metrics_csv_path(run_dir)
        write_atomic(path, metrics_csv_text(read_events(events_path(run_dir))).encode("utf-8"))
    elif what == "curves-svg":
        path = output or curves_svg_path(run_dir)
        write_curves_svg(read_events(events_path(run_dir)), path)
    elif what == "pool-summary":
        path = output or pool_summary_path(run_dir)
        write_json(path, pool_summary(read_pool(pool_path(run_dir)), read_events(events_path(run_dir))))
    else:
        path = output or internalization_dataset_path(run_dir)
        records = internalization_records(read_pool(pool_path(run_dir)), analysis_instruction(template_version))
        write_jsonl(path, records)
    logger.info("exported %s to %s", what, path)
    return path
