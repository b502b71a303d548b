import argparse
import json
import logging
import sys

from .config import load_config
from .errors import (
    AnalysisParseError,
    AnalystTransportError,
    CheckpointError,
    ConfigError,
    ContractError,
    EventLogError,
    SerializationError,
    TaskFileError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_REMOTE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _error_json(code: str, message: str, detail: str | None = None) -> None:
    _write_json({"ok": False, "error": {"code": code, "message": message, "detail": detail}})


def _ok(data: dict) -> int:
    _write_json({"ok": True, "data": data})
    return EXIT_OK


def _config(args: argparse.Namespace):
    return load_config(args.config, args.overrides)


def cmd_gen_tasks(args: argparse.Namespace) -> int:
    from .operations import gen_tasks

    return _ok(gen_tasks(_config(args), args.task_file, args.gen))


def cmd_train(args: argparse.Namespace) -> int:
    from .operations import train_run

    return _ok(train_run(_config(args), args.run_dir, task_file=args.task_file, resume=not args.no_resume))


def cmd_eval(args: argparse.Namespace) -> int:
    from .operations import evaluate_run

    return _ok(evaluate_run(_config(args), args.run_dir, task_file=args.task_file))


def cmd_compare(args: argparse.Namespace) -> int:
    from .operations import compare

    return _ok(compare(_config(args), args.run_a, args.run_b, task_file=args.task_file))


def cmd_experiment(args: argparse.Namespace) -> int:
    from .operations import experiment

    try:
        seeds = [int(seed) for seed in args.seeds.split(",") if seed.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be a comma-separated list of integers: {args.seeds}") from exc
    return _ok(experiment(_config(args), args.out_dir, seeds, task_file=args.task_file))


def cmd_pool_inspect(args: argparse.Namespace) -> int:
    from .operations import pool_inspect

    return _ok(pool_inspect(args.run_dir, status=args.status, limit=args.limit))


def cmd_export(args: argparse.Namespace) -> int:
    from .operations import export

    return _ok(export(args.run_dir, args.what, output=args.output))


def cmd_serve(args: argparse.Namespace) -> int:
    from .mcp_server import run as run_mcp_server

    run_mcp_server(_config(args))
    return EXIT_OK


def _handle_cli_error(exc: Exception) -> int:
    if isinstance(exc, AnalystTransportError):
        _error_json("REMOTE_ERROR", str(exc), exc.detail)
        return EXIT_REMOTE
    if isinstance(exc, AnalysisParseError):
        _error_json("ANALYSIS_PARSE_ERROR", str(exc), exc.detail)
        return EXIT_DATA
    if isinstance(exc, SerializationError):
        _error_json("SERIALIZATION_ERROR", str(exc), exc.symbol)
        return EXIT_DATA
    if isinstance(exc, (TaskFileError, EventLogError, CheckpointError)):
        _error_json("DATA_ERROR", "data or parse error", str(exc))
        return EXIT_DATA
    if isinstance(exc, ConfigError):
        _error_json("CONFIG_ERROR", "configuration error", str(exc))
        return EXIT_USAGE
    if isinstance(exc, ContractError):
        _error_json("USAGE_ERROR", "invalid request", str(exc))
        return EXIT_USAGE
    _error_json("UNKNOWN", "unexpected error", str(exc))
    return EXIT_USAGE


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    common.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="stderr log level (default: WARNING)",
    )

    parser = _Parser(prog="mel", description="Meta-experience learning on verifiable-reward tasks")
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen_parser = subparsers.add_parser("gen-tasks", parents=[common], help="generate a task file")
    gen_parser.add_argument("--gen", help="family=modchain,count=N,seed=S[,min_steps=a,max_steps=b,moduli=3,5,7]")
    gen_parser.add_argument("--task-file", default="tasks.jsonl", help="output path (default: tasks.jsonl)")
    gen_parser.set_defaults(func=cmd_gen_tasks)

    train_parser = subparsers.add_parser("train", parents=[common], help="train a policy")
    train_parser.add_argument("--run-dir", required=True, help="run directory")
    train_parser.add_argument("--task-file", help="training tasks (default: generated from task.*)")
    train_parser.add_argument("--no-resume", action="store_true", help="start over even if checkpoints exist")
    train_parser.set_defaults(func=cmd_train)

    eval_parser = subparsers.add_parser("eval", parents=[common], help="evaluate a run's final checkpoint")
    eval_parser.add_argument("--run-dir", required=True, help="run directory")
    eval_parser.add_argument("--task-file", help="evaluation tasks (default: held-out generated tasks)")
    eval_parser.set_defaults(func=cmd_eval)

    compare_parser = subparsers.add_parser("compare", parents=[common], help="compare two runs")
    compare_parser.add_argument("run_a", help="baseline run directory")
    compare_parser.add_argument("run_b", help="candidate run directory")
    compare_parser.add_argument("--task-file", help="evaluation tasks (default: held-out generated tasks)")
    compare_parser.set_defaults(func=cmd_compare)

    experiment_parser = subparsers.add_parser(
        "experiment", parents=[common], help="GRPO vs MEL arms over several seeds"
    )
    experiment_parser.add_argument("--out-dir", required=True, help="directory for per-seed runs")
    experiment_parser.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds (default: 0-4)")
    experiment_parser.add_argument("--task-file", help="training tasks (default: generated from task.*)")
    experiment_parser.set_defaults(func=cmd_experiment)

    pool_parser = subparsers.add_parser("pool", help="meta-experience pool tools")
    pool_sub = pool_parser.add_subparsers(dest="pool_command", required=True)
    inspect_parser = pool_sub.add_parser("inspect", parents=[common], help="list pool entries")
    inspect_parser.add_argument("--run-dir", required=True, help="run directory")
    inspect_parser.add_argument("--status", choices=["candidate", "validated", "rejected"], help="filter by status")
    inspect_parser.add_argument("--limit", type=int, help="max entries to print")
    inspect_parser.set_defaults(func=cmd_pool_inspect)

    export_parser = subparsers.add_parser("export", parents=[common], help="export run artifacts")
    export_parser.add_argument("--run-dir", required=True, help="run directory")
    export_parser.add_argument(
        "--what",
        required=True,
        choices=["metrics-csv", "curves-svg", "pool-summary", "internalization-dataset"],
        help="artifact to write",
    )
    export_parser.add_argument("--output", help="output path (default: inside the run directory)")
    export_parser.set_defaults(func=cmd_export)

    serve_parser = subparsers.add_parser("serve", parents=[common], help="start MCP server")
    serve_parser.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, getattr(args, "log_level", "WARNING")),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        return _handle_cli_error(exc)


if __name__ == "__main__":
    raise SystemExit(main())
