from __future__ import annotations

import json
from typing import Any

import anyio
from mcp import types
from mcp.server import Server
from mcp.server.models import InitializationOptions
from mcp.server.stdio import stdio_server

from .config import MelConfig
from .errors import AnalystError, CheckpointError, ConfigError, ContractError, EventLogError, MelError, TaskFileError
from .operations import evaluate_run, gen_tasks, pool_inspect, run_status


class ServerState:
    def __init__(self) -> None:
        self.config: MelConfig | None = None


state = ServerState()
server = Server("mel")


def _error_response(code: str, message: str, detail: Any | None = None) -> dict:
    return {"ok": False, "error": {"code": code, "message": message, "detail": detail}}


def _handle_exception(exc: Exception) -> dict:
    if isinstance(exc, (TaskFileError, EventLogError, CheckpointError)):
        return _error_response("DATA_ERROR", "data or parse error", str(exc))
    if isinstance(exc, ConfigError):
        return _error_response("CONFIG_ERROR", "configuration error", str(exc))
    if isinstance(exc, ContractError):
        return _error_response("USAGE_ERROR", "invalid request", str(exc))
    if isinstance(exc, AnalystError):
        return _error_response("REMOTE_ERROR", "analyst error", str(exc))
    if isinstance(exc, MelError):
        return _error_response("MEL_ERROR", "mel error", str(exc))
    return _error_response("UNKNOWN", "unexpected error", str(exc))


def _require_config() -> MelConfig:
    if state.config is None:
        raise ConfigError("server started without a configuration")
    return state.config


def _content(payload: dict) -> list[types.TextContent]:
    return [types.TextContent(type="text", text=json.dumps(payload, sort_keys=True))]


TOOLS = [
    types.Tool(
        name="gen_tasks",
        description="generate a modular-chain task file",
        inputSchema={
            "type": "object",
            "properties": {
                "output": {"type": "string"},
                "gen": {"type": "string"},
            },
            "required": ["output"],
            "additionalProperties": False,
        },
    ),
    types.Tool(
        name="evaluate",
        description="evaluate the final checkpoint of a run on held-out tasks",
        inputSchema={
            "type": "object",
            "properties": {
                "run_dir": {"type": "string"},
                "task_file": {"type": "string"},
            },
            "required": ["run_dir"],
            "additionalProperties": False,
        },
    ),
    types.Tool(
        name="pool_inspect",
        description="list meta-experiences recorded by a run",
        inputSchema={
            "type": "object",
            "properties": {
                "run_dir": {"type": "string"},
                "status": {"type": "string", "enum": ["candidate", "validated", "rejected"]},
                "limit": {"type": "integer", "minimum": 1},
            },
            "required": ["run_dir"],
            "additionalProperties": False,
        },
    ),
    types.Tool(
        name="run_status",
        description="latest step, checkpoint and event of a run",
        inputSchema={
            "type": "object",
            "properties": {"run_dir": {"type": "string"}},
            "required": ["run_dir"],
            "additionalProperties": False,
        },
    ),
]


@server.list_tools()
async def list_tools():
    return TOOLS


def dispatch(name: str, arguments: dict) -> dict:
    try:
        if name == "gen_tasks":
            payload = gen_tasks(_require_config(), arguments["output"], arguments.get("gen"))
            return {"ok": True, "data": payload}
        if name == "evaluate":
            payload = evaluate_run(_require_config(), arguments["run_dir"], task_file=arguments.get("task_file"))
            return {"ok": True, "data": payload}
        if name == "pool_inspect":
            payload = pool_inspect(
                arguments["run_dir"],
                status=arguments.get("status"),
                limit=arguments.get("limit"),
            )
            return {"ok": True, "data": payload}
        if name == "run_status":
            return {"ok": True, "data": run_status(arguments["run_dir"])}
        return _error_response("UNKNOWN_TOOL", "unknown tool", name)
    except Exception as exc:
        return _handle_exception(exc)


@server.call_tool()
async def call_tool(name: str, arguments: dict):
    return _content(await anyio.to_thread.run_sync(dispatch, name, arguments))


async def _serve() -> None:
    capabilities = types.ServerCapabilities(tools=types.ToolsCapability(listChanged=False))
    init_opts = InitializationOptions(
        server_name="mel",
        server_version="0.1.0",
        capabilities=capabilities,
    )
    async with stdio_server() as (read_stream, write_stream):
        await server.run(read_stream, write_stream, initialization_options=init_opts)


def run(config: MelConfig) -> None:
    state.config = config
    anyio.run(_serve)


__all__ = ["dispatch", "run", "server"]
