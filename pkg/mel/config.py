from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Any

from .errors import ConfigError


SCHEMA_VERSION = 1

ANALYST_BACKENDS = ("scripted", "remote", "none")
SERIALIZATION_MODES = ("hint-tokens", "natural-language")
POOL_PERSIST_MODES = ("all", "validated")


def _parse_int(value: Any, *, name: str, minimum: int | None = None) -> int:
    try:
        parsed = int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be an integer") from exc
    if minimum is not None and parsed < minimum:
        raise ConfigError(f"{name} must be >= {minimum}")
    return parsed


def _parse_float(
    value: Any,
    *,
    name: str,
    minimum: float | None = None,
    maximum: float | None = None,
    strict: bool = False,
) -> float:
    try:
        parsed = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a number") from exc
    if parsed != parsed or parsed in (float("inf"), float("-inf")):
        raise ConfigError(f"{name} must be finite")
    if minimum is not None and (parsed <= minimum if strict else parsed < minimum):
        raise ConfigError(f"{name} must be {'>' if strict else '>='} {minimum}")
    if maximum is not None and (parsed >= maximum if strict else parsed > maximum):
        raise ConfigError(f"{name} must be {'<' if strict else '<='} {maximum}")
    return parsed


def _parse_bool(value: Any, *, name: str) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in {"true", "1", "yes", "on"}:
        return True
    if text in {"false", "0", "no", "off"}:
        return False
    raise ConfigError(f"{name} must be a boolean")


def _is_none(value: Any) -> bool:
    return value is None or (isinstance(value, str) and value.strip().lower() in {"", "none", "null"})


def _parse_optional_int(value: Any, *, name: str, minimum: int | None = None) -> int | None:
    if _is_none(value):
        return None
    return _parse_int(value, name=name, minimum=minimum)


def _parse_optional_str(value: Any) -> str | None:
    if _is_none(value):
        return None
    return str(value)


def _parse_int_tuple(value: Any, *, name: str, minimum: int | None = None) -> tuple[int, ...]:
    if isinstance(value, str):
        items = [item for item in value.replace(" ", "").split(",") if item]
    else:
        items = list(value)
    if not items:
        raise ConfigError(f"{name} must not be empty")
    return tuple(_parse_int(item, name=name, minimum=minimum) for item in items)


def _parse_choice(value: Any, *, name: str, choices: tuple[str, ...]) -> str:
    text = str(value).strip().lower()
    if text not in choices:
        raise ConfigError(f"{name} must be one of {'/'.join(choices)}")
    return text


def _reject_unknown(section: str, data: dict[str, Any], known: set[str]) -> None:
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class TaskConfig:
    family: str = "modchain"
    count: int = 2000
    seed: int = 0
    min_steps: int = 1
    max_steps: int = 3
    moduli: tuple[int, ...] = (3, 5, 7)
    heldout_count: int = 500
    heldout_seed: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "count": self.count,
            "seed": self.seed,
            "min_steps": self.min_steps,
            "max_steps": self.max_steps,
            "moduli": self.moduli,
            "heldout_count": self.heldout_count,
            "heldout_seed": self.heldout_seed,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "TaskConfig":
        _reject_unknown("task", data, set(TaskConfig().to_dict()))
        defaults = TaskConfig()
        min_steps = _parse_int(data.get("min_steps", defaults.min_steps), name="task.min_steps", minimum=1)
        max_steps = _parse_int(data.get("max_steps", defaults.max_steps), name="task.max_steps", minimum=1)
        if max_steps < min_steps:
            raise ConfigError("task.max_steps must be >= task.min_steps")
        moduli = _parse_int_tuple(data.get("moduli", defaults.moduli), name="task.moduli", minimum=2)
        if any(m > 97 or any(m % d == 0 for d in range(2, int(m**0.5) + 1)) for m in moduli):
            raise ConfigError("task.moduli must be primes <= 97")
        return TaskConfig(
            family=str(data.get("family", defaults.family)).strip(),
            count=_parse_int(data.get("count", defaults.count), name="task.count"),
            seed=_parse_int(data.get("seed", defaults.seed), name="task.seed"),
            min_steps=min_steps,
            max_steps=max_steps,
            moduli=moduli,
            heldout_count=_parse_int(
                data.get("heldout_count", defaults.heldout_count), name="task.heldout_count", minimum=0
            ),
            heldout_seed=_parse_int(data.get("heldout_seed", defaults.heldout_seed), name="task.heldout_seed"),
        )


@dataclass(frozen=True)
class FeatureSpec:
    """Context-feature families of the log-linear policy.

    ``window`` is the n-gram width W. ``hint_window`` bounds how far back hint-token
    presence is read; ``None`` reads the whole context.
    """

    window: int = 6
    ngram: bool = True
    bigram: bool = True
    phase: bool = True
    hint: bool = True
    hint_window: int | None = None
    phase_cap: int = 7

    def to_dict(self) -> dict[str, Any]:
        return {
            "window": self.window,
            "ngram": self.ngram,
            "bigram": self.bigram,
            "phase": self.phase,
            "hint": self.hint,
            "hint_window": self.hint_window,
            "phase_cap": self.phase_cap,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "FeatureSpec":
        _reject_unknown("policy", data, set(FeatureSpec().to_dict()))
        defaults = FeatureSpec()
        return FeatureSpec(
            window=_parse_int(data.get("window", defaults.window), name="policy.window", minimum=0),
            ngram=_parse_bool(data.get("ngram", defaults.ngram), name="policy.ngram"),
            bigram=_parse_bool(data.get("bigram", defaults.bigram), name="policy.bigram"),
            phase=_parse_bool(data.get("phase", defaults.phase), name="policy.phase"),
            hint=_parse_bool(data.get("hint", defaults.hint), name="policy.hint"),
            hint_window=_parse_optional_int(
                data.get("hint_window", defaults.hint_window), name="policy.hint_window", minimum=0
            ),
            phase_cap=_parse_int(data.get("phase_cap", defaults.phase_cap), name="policy.phase_cap", minimum=1),
        )


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 1.0
    max_tokens: int = 32
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"temperature": self.temperature, "max_tokens": self.max_tokens, "seed": self.seed}

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "DecodingConfig":
        _reject_unknown("decoding", data, set(DecodingConfig().to_dict()))
        defaults = DecodingConfig()
        return DecodingConfig(
            temperature=_parse_float(
                data.get("temperature", defaults.temperature), name="decoding.temperature", minimum=0.0
            ),
            max_tokens=_parse_int(data.get("max_tokens", defaults.max_tokens), name="decoding.max_tokens", minimum=1),
            seed=_parse_int(data.get("seed", defaults.seed), name="decoding.seed"),
        )


@dataclass(frozen=True)
class ClipConfig:
    epsilon: float = 0.2
    learning_rate: float = 1.0
    inner_epochs: int = 1
    kl_coef: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "learning_rate": self.learning_rate,
            "inner_epochs": self.inner_epochs,
            "kl_coef": self.kl_coef,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "ClipConfig":
        _reject_unknown("clip", data, set(ClipConfig().to_dict()))
        defaults = ClipConfig()
        return ClipConfig(
            epsilon=_parse_float(
                data.get("epsilon", defaults.epsilon), name="clip.epsilon", minimum=0.0, maximum=1.0, strict=True
            ),
            learning_rate=_parse_float(
                data.get("learning_rate", defaults.learning_rate), name="clip.learning_rate", minimum=0.0, strict=True
            ),
            inner_epochs=_parse_int(
                data.get("inner_epochs", defaults.inner_epochs), name="clip.inner_epochs", minimum=1
            ),
            kl_coef=_parse_float(data.get("kl_coef", defaults.kl_coef), name="clip.kl_coef", minimum=0.0),
        )


@dataclass(frozen=True)
class ReplayConfig:
    attempts: int = 1
    temperature: float = 0.0
    max_tokens: int = 32

    def to_dict(self) -> dict[str, Any]:
        return {"attempts": self.attempts, "temperature": self.temperature, "max_tokens": self.max_tokens}

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "ReplayConfig":
        _reject_unknown("replay", data, set(ReplayConfig().to_dict()))
        defaults = ReplayConfig()
        return ReplayConfig(
            attempts=_parse_int(data.get("attempts", defaults.attempts), name="replay.attempts", minimum=1),
            temperature=_parse_float(
                data.get("temperature", defaults.temperature), name="replay.temperature", minimum=0.0
            ),
            max_tokens=_parse_int(data.get("max_tokens", defaults.max_tokens), name="replay.max_tokens", minimum=1),
        )


def _analyst_token_from_env() -> str | None:
    raw = os.environ.get("MEL_ANALYST_TOKEN")
    if raw is None or raw == "":
        return None
    return raw


@dataclass(frozen=True)
class AnalystConfig:
    backend: str = "scripted"
    endpoint: str | None = None
    token: str | None = None
    timeout: float = 60.0
    max_retries: int = 2
    retry_backoff: float = 0.5
    max_in_flight: int = 4
    max_tokens: int = 2048
    temperature: float = 1.0
    template_version: str = "v1"

    def to_dict(self) -> dict[str, Any]:
        return {
            "backend": self.backend,
            "endpoint": self.endpoint,
            "token": self.token,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "retry_backoff": self.retry_backoff,
            "max_in_flight": self.max_in_flight,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "template_version": self.template_version,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "AnalystConfig":
        _reject_unknown("analyst", data, set(AnalystConfig().to_dict()))
        defaults = AnalystConfig()
        backend = _parse_choice(data.get("backend", defaults.backend), name="analyst.backend", choices=ANALYST_BACKENDS)
        endpoint = _parse_optional_str(data.get("endpoint"))
        token = _parse_optional_str(data.get("token"))
        if token is None:
            token = _analyst_token_from_env()
        if backend == "remote" and endpoint is None:
            raise ConfigError("analyst.endpoint is required for the remote backend")
        return AnalystConfig(
            backend=backend,
            endpoint=endpoint,
            token=token,
            timeout=_parse_float(data.get("timeout", defaults.timeout), name="analyst.timeout", minimum=0.0, strict=True),
            max_retries=_parse_int(data.get("max_retries", defaults.max_retries), name="analyst.max_retries", minimum=0),
            retry_backoff=_parse_float(
                data.get("retry_backoff", defaults.retry_backoff), name="analyst.retry_backoff", minimum=0.0
            ),
            max_in_flight=_parse_int(
                data.get("max_in_flight", defaults.max_in_flight), name="analyst.max_in_flight", minimum=1
            ),
            max_tokens=_parse_int(data.get("max_tokens", defaults.max_tokens), name="analyst.max_tokens", minimum=1),
            temperature=_parse_float(
                data.get("temperature", defaults.temperature), name="analyst.temperature", minimum=0.0
            ),
            template_version=str(data.get("template_version", defaults.template_version)),
        )


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    queries_per_step: int = 32
    mini_batch_size: int | None = None
    total_steps: int = 200
    checkpoint_interval: int = 50
    lambda_mel: float = 1.0
    pair_cap: int = 2
    seed: int = 0
    deterministic: bool = True
    warmup_steps: int = 100
    warmup_learning_rate: float = 0.5
    warmup_demos: int = 64
    serialization: str = "hint-tokens"
    pool_persist: str = "all"
    workers: int = 1
    policy: FeatureSpec = field(default_factory=FeatureSpec)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    clip: ClipConfig = field(default_factory=ClipConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    analyst: AnalystConfig = field(default_factory=AnalystConfig)

    @property
    def effective_mini_batch(self) -> int:
        return self.mini_batch_size or self.queries_per_step

    @property
    def mel_enabled(self) -> bool:
        return self.lambda_mel > 0 and self.analyst.backend != "none"

    def scalars(self) -> dict[str, Any]:
        return {
            "group_size": self.group_size,
            "queries_per_step": self.queries_per_step,
            "mini_batch_size": self.mini_batch_size,
            "total_steps": self.total_steps,
            "checkpoint_interval": self.checkpoint_interval,
            "lambda_mel": self.lambda_mel,
            "pair_cap": self.pair_cap,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "warmup_steps": self.warmup_steps,
            "warmup_learning_rate": self.warmup_learning_rate,
            "warmup_demos": self.warmup_demos,
            "serialization": self.serialization,
            "pool_persist": self.pool_persist,
            "workers": self.workers,
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            **self.scalars(),
            "policy": self.policy.to_dict(),
            "decoding": self.decoding.to_dict(),
            "clip": self.clip.to_dict(),
            "replay": self.replay.to_dict(),
            "analyst": self.analyst.to_dict(),
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "TrainConfig":
        nested = {"policy", "decoding", "clip", "replay", "analyst"}
        _reject_unknown("train", data, set(TrainConfig().scalars()) | nested)
        defaults = TrainConfig()
        group_size = _parse_int(data.get("group_size", defaults.group_size), name="train.group_size", minimum=2)
        return TrainConfig(
            group_size=group_size,
            queries_per_step=_parse_int(
                data.get("queries_per_step", defaults.queries_per_step), name="train.queries_per_step", minimum=1
            ),
            mini_batch_size=_parse_optional_int(data.get("mini_batch_size"), name="train.mini_batch_size", minimum=1),
            total_steps=_parse_int(data.get("total_steps", defaults.total_steps), name="train.total_steps", minimum=0),
            checkpoint_interval=_parse_int(
                data.get("checkpoint_interval", defaults.checkpoint_interval),
                name="train.checkpoint_interval",
                minimum=1,
            ),
            lambda_mel=_parse_float(data.get("lambda_mel", defaults.lambda_mel), name="train.lambda_mel", minimum=0.0),
            pair_cap=_parse_int(data.get("pair_cap", defaults.pair_cap), name="train.pair_cap", minimum=1),
            seed=_parse_int(data.get("seed", defaults.seed), name="train.seed"),
            deterministic=_parse_bool(data.get("deterministic", defaults.deterministic), name="train.deterministic"),
            warmup_steps=_parse_int(
                data.get("warmup_steps", defaults.warmup_steps), name="train.warmup_steps", minimum=0
            ),
            warmup_learning_rate=_parse_float(
                data.get("warmup_learning_rate", defaults.warmup_learning_rate),
                name="train.warmup_learning_rate",
                minimum=0.0,
            ),
            warmup_demos=_parse_int(
                data.get("warmup_demos", defaults.warmup_demos), name="train.warmup_demos", minimum=0
            ),
            serialization=_parse_choice(
                data.get("serialization", defaults.serialization),
                name="train.serialization",
                choices=SERIALIZATION_MODES,
            ),
            pool_persist=_parse_choice(
                data.get("pool_persist", defaults.pool_persist), name="train.pool_persist", choices=POOL_PERSIST_MODES
            ),
            workers=_parse_int(data.get("workers", defaults.workers), name="train.workers", minimum=1),
            policy=FeatureSpec.from_dict(data.get("policy", {})),
            decoding=DecodingConfig.from_dict(data.get("decoding", {})),
            clip=ClipConfig.from_dict(data.get("clip", {})),
            replay=ReplayConfig.from_dict(data.get("replay", {})),
            analyst=AnalystConfig.from_dict(data.get("analyst", {})),
        )


@dataclass(frozen=True)
class EvalConfig:
    k: int = 8
    temperature_pass1: float = 0.0
    temperature_k: float = 0.6
    max_tokens: int = 32
    seeds: tuple[int, ...] = (0,)
    workers: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "temperature_pass1": self.temperature_pass1,
            "temperature_k": self.temperature_k,
            "max_tokens": self.max_tokens,
            "seeds": self.seeds,
            "workers": self.workers,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "EvalConfig":
        _reject_unknown("eval", data, set(EvalConfig().to_dict()))
        defaults = EvalConfig()
        return EvalConfig(
            k=_parse_int(data.get("k", defaults.k), name="eval.k", minimum=1),
            temperature_pass1=_parse_float(
                data.get("temperature_pass1", defaults.temperature_pass1), name="eval.temperature_pass1", minimum=0.0
            ),
            temperature_k=_parse_float(
                data.get("temperature_k", defaults.temperature_k), name="eval.temperature_k", minimum=0.0
            ),
            max_tokens=_parse_int(data.get("max_tokens", defaults.max_tokens), name="eval.max_tokens", minimum=1),
            seeds=_parse_int_tuple(data.get("seeds", defaults.seeds), name="eval.seeds"),
            workers=_parse_int(data.get("workers", defaults.workers), name="eval.workers", minimum=1),
        )


@dataclass(frozen=True)
class MelConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return {"task": self.task.to_dict(), "train": self.train.to_dict(), "eval": self.eval.to_dict()}

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "MelConfig":
        _reject_unknown("top-level", data, {"task", "train", "eval"})
        return MelConfig(
            task=TaskConfig.from_dict(data.get("task", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            eval=EvalConfig.from_dict(data.get("eval", {})),
        )


_TRAIN_NESTED = ("policy", "decoding", "clip", "replay", "analyst")


def config_to_flat(config: MelConfig, *, redact_secrets: bool = True) -> dict[str, str]:
    flat: dict[str, str] = {}
    for key, value in config.task.to_dict().items():
        flat[f"task.{key}"] = _format_value(value)
    for key, value in config.train.scalars().items():
        flat[f"train.{key}"] = _format_value(value)
    for section in _TRAIN_NESTED:
        for key, value in getattr(config.train, section).to_dict().items():
            if redact_secrets and section == "analyst" and key == "token":
                value = None
            flat[f"{section}.{key}"] = _format_value(value)
    for key, value in config.eval.to_dict().items():
        flat[f"eval.{key}"] = _format_value(value)
    return flat


def config_from_flat(flat: dict[str, str]) -> MelConfig:
    nested: dict[str, Any] = {"task": {}, "train": {section: {} for section in _TRAIN_NESTED}, "eval": {}}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"config key {key!r} must look like section.name")
        if section in ("task", "eval"):
            nested[section][name] = value
        elif section == "train":
            if name in _TRAIN_NESTED:
                raise ConfigError(f"config key {key!r} names a section, not a value")
            nested["train"][name] = value
        elif section in _TRAIN_NESTED:
            nested["train"][section][name] = value
        else:
            raise ConfigError(f"unknown config section {section!r}")
    return MelConfig.from_dict(nested)


def format_flat(flat: dict[str, str]) -> str:
    return "".join(f"{key} = {value}\n" for key, value in flat.items())


def parse_flat_text(text: str, *, source: str = "<config>") -> dict[str, str]:
    flat: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        flat[key.strip()] = value.strip()
    return flat


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    flat: dict[str, str] = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} must look like key=value")
        flat[key.strip()] = value.strip()
    return flat


def load_config(path: str | None = None, overrides: list[str] | None = None) -> MelConfig:
    flat: dict[str, str] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        flat.update(parse_flat_text(text, source=path))
    flat.update(parse_overrides(overrides))
    return config_from_flat(flat)


def resolved_config_text(config: MelConfig) -> str:
    header = f"# schema_version = {SCHEMA_VERSION}\n"
    return header + format_flat(config_to_flat(config))


def reference_train_config() -> TrainConfig:
    """LLM-scale reference setup: G=8, batch 128, lr 1e-6."""
    return replace(
        TrainConfig(),
        group_size=8,
        queries_per_step=128,
        mini_batch_size=128,
        clip=replace(ClipConfig(), learning_rate=1e-6),
        decoding=replace(DecodingConfig(), temperature=1.0),
    )
