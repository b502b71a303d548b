from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass
from importlib import resources
from typing import Callable

import httpx

from .config import AnalystConfig
from .errors import AnalysisParseError, AnalystTransportError, ConfigError
from .metaexp import ContrastivePair, MetaExperience, analyze
from .taskenv import Query

logger = logging.getLogger(__name__)

META_EXPERIENCE_TEMPLATE = "meta_experience_prompt"
VALIDATION_TEMPLATE = "empirical_validation_prompt"

SECTION_HEADINGS = (
    "Failure Resolution Path",
    "Analysis of Success Factors",
    "First-Person Reflective Summary",
    "Subject Heuristics",
)

_ANSWER_FORMAT = (
    "Evaluate the chain strictly left to right and reduce modulo m after every operation. "
    "Write each step as 't: v' on its own line and finish with '#### v'."
)


def load_template(name: str, version: str = "v1") -> str:
    path = resources.files("mel") / "templates" / f"{name}.{version}.txt"
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"no prompt template {name!r} for version {version!r}") from exc


def fill_template(template: str, **values: str) -> str:
    filled = template
    for key, value in values.items():
        filled = filled.replace("{" + key + "}", value)
    return filled


def analysis_instruction(version: str = "v1") -> str:
    """The analyst instruction without the per-problem question block."""
    template = load_template(META_EXPERIENCE_TEMPLATE, version)
    head, _, _ = template.partition("Here the question and the corresponding solutions.")
    return head.rstrip() + "\n"


def question_text(query: Query) -> str:
    return f"{query.prompt_text}\n{_ANSWER_FORMAT}"


@dataclass(frozen=True)
class AnalysisSections:
    failure_path: str
    success_factors: str
    reflective_summary: str
    heuristics: str


def parse_analysis(text: str) -> AnalysisSections:
    """Split a response on the four mandatory headings, in any order."""
    found: list[tuple[int, int, str]] = []
    missing: list[str] = []
    for heading in SECTION_HEADINGS:
        match = re.search(re.escape(heading), text, flags=re.IGNORECASE)
        if match is None:
            missing.append(heading)
            continue
        line_start = text.rfind("\n", 0, match.start()) + 1
        line_end = text.find("\n", match.end())
        found.append((line_start, len(text) if line_end < 0 else line_end + 1, heading))
    if missing:
        raise AnalysisParseError("analysis response is missing mandatory sections", detail=", ".join(missing))
    found.sort()
    bodies: dict[str, str] = {}
    for position, (_, body_start, heading) in enumerate(found):
        body_end = found[position + 1][0] if position + 1 < len(found) else len(text)
        body = text[body_start:body_end]
        bodies[heading] = re.sub(r"[#*\s]+$", "", body.strip()).strip()
    empty = [heading for heading, body in bodies.items() if not body]
    if empty:
        raise AnalysisParseError("analysis response has empty mandatory sections", detail=", ".join(empty))
    return AnalysisSections(
        failure_path=bodies["Failure Resolution Path"],
        success_factors=bodies["Analysis of Success Factors"],
        reflective_summary=bodies["First-Person Reflective Summary"],
        heuristics=bodies["Subject Heuristics"],
    )


class RemoteAnalyst:
    """Text-generation analyst behind a ``{prompt, max_tokens, temperature} -> {text}`` endpoint."""

    name = "remote"

    def __init__(
        self,
        config: AnalystConfig,
        *,
        http_client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if not config.endpoint:
            raise ConfigError("analyst.endpoint is required for the remote backend")
        self._config = config
        self._headers = {"Content-Type": "application/json"}
        if config.token:
            self._headers["Authorization"] = f"Bearer {config.token}"
        self._client = http_client or httpx.Client(timeout=config.timeout, headers=self._headers)
        self._owns_client = http_client is None
        self._sleep = sleep
        self._meta_template = load_template(META_EXPERIENCE_TEMPLATE, config.template_version)
        self._validation_template = load_template(VALIDATION_TEMPLATE, config.template_version)

    def close(self) -> None:
        if self._owns_client:
            self._client.close()

    def __enter__(self) -> "RemoteAnalyst":
        return self

    def __exit__(self, *_exc) -> None:
        self.close()

    def complete(self, prompt: str, *, temperature: float | None = None) -> str:
        payload = {
            "prompt": prompt,
            "max_tokens": self._config.max_tokens,
            "temperature": self._config.temperature if temperature is None else temperature,
        }
        attempts = self._config.max_retries + 1
        last_error: AnalystTransportError | None = None
        for attempt in range(attempts):
            try:
                return self._post(payload)
            except AnalystTransportError as exc:
                if not exc.retriable or attempt == attempts - 1:
                    raise
                last_error = exc
                delay = self._config.retry_backoff * (2**attempt)
                logger.warning("analyst request failed (%s), retrying in %.2fs", exc, delay)
                self._sleep(delay)
        raise last_error or AnalystTransportError("analyst request failed")

    def _post(self, payload: dict) -> str:
        try:
            response = self._client.post(
                self._config.endpoint, json=payload, headers=self._headers, timeout=self._config.timeout
            )
        except httpx.TimeoutException as exc:
            raise AnalystTransportError("Analyst request timed out", detail=str(exc)) from exc
        except httpx.TransportError as exc:
            raise AnalystTransportError("Analyst request failed", detail=str(exc)) from exc
        if response.status_code != 200:
            raise AnalystTransportError(
                "Analyst request failed",
                status_code=response.status_code,
                detail=response.text,
                retriable=response.status_code == 429 or response.status_code >= 500,
            )
        try:
            data = response.json()
        except ValueError as exc:
            raise AnalystTransportError("Analyst response is not JSON", detail=response.text, retriable=False) from exc
        text = data.get("text") if isinstance(data, dict) else None
        if not isinstance(text, str):
            raise AnalystTransportError("Analyst response has no text field", detail=response.text, retriable=False)
        return text

    def analysis_prompt(self, pair: ContrastivePair, query: Query) -> str:
        return fill_template(
            self._meta_template,
            question=question_text(query),
            error_ans=pair.negative.text,
            correct_ans=pair.positive.text,
        )

    def validation_prompt(self, me: MetaExperience, query: Query) -> str:
        return fill_template(self._validation_template, experience=me.natural_language(), question=question_text(query))

    def analyze(self, pair: ContrastivePair, query: Query, step: int) -> MetaExperience:
        """One-prompt analysis; an unparseable reply becomes a rejected record."""
        text = self.complete(self.analysis_prompt(pair, query))
        try:
            sections = parse_analysis(text)
        except AnalysisParseError as exc:
            logger.warning("unparseable analysis for %s: %s (%s)", pair.negative.trajectory_id, exc, exc.detail)
            return analyze(
                pair,
                query,
                step=step,
                backend=self.name,
                status="rejected",
                diagnostics=f"{exc}: {exc.detail}",
            )
        return analyze(
            pair,
            query,
            step=step,
            backend=self.name,
            attribution=sections.failure_path,
            heuristic_text=sections.heuristics,
        )

    def replay_texts(self, me: MetaExperience, query: Query, attempts: int, temperature: float) -> list[str]:
        prompt = self.validation_prompt(me, query)
        return [self.complete(prompt, temperature=temperature) for _ in range(attempts)]
