import os


def normalize_run_dir(path: str) -> str:
    return os.path.realpath(os.path.abspath(path))


def resolved_config_path(run_dir: str) -> str:
    return os.path.join(run_dir, "config.resolved")


def events_path(run_dir: str) -> str:
    return os.path.join(run_dir, "events.jsonl")


def pool_path(run_dir: str) -> str:
    return os.path.join(run_dir, "pool.jsonl")


def metrics_csv_path(run_dir: str) -> str:
    return os.path.join(run_dir, "metrics.csv")


def curves_svg_path(run_dir: str) -> str:
    return os.path.join(run_dir, "curves.svg")


def pool_summary_path(run_dir: str) -> str:
    return os.path.join(run_dir, "pool_summary.json")


def internalization_dataset_path(run_dir: str) -> str:
    return os.path.join(run_dir, "internalization.jsonl")


def checkpoints_dir(run_dir: str) -> str:
    return os.path.join(run_dir, "checkpoints")


def checkpoint_path(run_dir: str, step: int) -> str:
    return os.path.join(checkpoints_dir(run_dir), f"step-{step}")
