"""OpenAI-compatible chat-completions backend.

Every request goes through the response cache first; in offline mode a miss
raises ``CacheMissError`` before any network IO happens.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence, TypeVar

import httpx

from bitmcts.cache import CacheKey, ResponseCache
from bitmcts.errors import CacheMissError, ConfigError, ProviderParseError, TransportError
from bitmcts.narrative import Direction, Origin, Outline, PlotEvent, StagedOutline, derive_id, render_outline
from bitmcts.prompts import load_template
from bitmcts.providers import parsing
from bitmcts.providers.base import (
    DirectOutline,
    EditOp,
    Judgment,
    ProposeRequest,
    ProviderProfile,
    ScoreBreakdown,
)

log = logging.getLogger(__name__)
T = TypeVar("T")


@dataclass(frozen=True)
class ChatReply:
    content: str
    prompt_tokens: int
    completion_tokens: int
    cached: bool


class ChatClient:
    kind = "openai-chat"

    def __init__(
        self,
        profile: ProviderProfile,
        cache: ResponseCache | None = None,
        offline: bool = False,
        transport: httpx.BaseTransport | None = None,
        env: Mapping[str, str] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.profile = profile
        self.cache = cache
        self.offline = offline
        self._transport = transport
        self._env = os.environ if env is None else env
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max(1, profile.max_in_flight))
        self._lock = threading.Lock()
        self._http: httpx.Client | None = None
        self.network_calls = 0
        self.usage = {"prompt_tokens": 0, "completion_tokens": 0}

    def _client(self) -> httpx.Client:
        if self._http is None:
            self._http = httpx.Client(timeout=self.profile.timeout, transport=self._transport)
        return self._http

    def close(self) -> None:
        if self._http is not None:
            self._http.close()
            self._http = None

    def complete(
        self, messages: list[dict[str, str]], temperature: float, ordinal: str | int = 0
    ) -> ChatReply:
        key = CacheKey.build(self.kind, self.profile.model, messages, temperature, ordinal)
        raw = self.cache.get(key) if self.cache is not None else None
        cached = raw is not None
        if raw is None:
            if self.offline:
                raise CacheMissError(f"offline mode: no cached response for {key.digest[:12]}")
            raw = self._post(messages, temperature)
            if self.cache is not None:
                self.cache.put(key, raw)
        reply = self._decode(raw, cached)
        with self._lock:
            self.usage["prompt_tokens"] += reply.prompt_tokens
            self.usage["completion_tokens"] += reply.completion_tokens
        return reply

    def _decode(self, raw: str, cached: bool) -> ChatReply:
        try:
            body = json.loads(raw)
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderParseError(f"malformed chat-completions body: {exc}") from exc
        usage = body.get("usage") or {}
        return ChatReply(
            content=content or "",
            prompt_tokens=int(usage.get("prompt_tokens", 0) or 0),
            completion_tokens=int(usage.get("completion_tokens", 0) or 0),
            cached=cached,
        )

    def _post(self, messages: list[dict[str, str]], temperature: float) -> str:
        api_key = self._env.get(self.profile.api_key_env)
        if not api_key:
            raise ConfigError(f"environment variable {self.profile.api_key_env} is not set")
        url = self.profile.endpoint.rstrip("/") + "/chat/completions"
        payload = {"model": self.profile.model, "messages": messages, "temperature": temperature}
        headers = {"Authorization": f"Bearer {api_key}"}
        policy = self.profile.retry
        last: Exception | None = None
        for attempt in range(max(1, policy.max_attempts)):
            if attempt:
                self._sleep(policy.backoff * 2 ** (attempt - 1))
            log.debug("request %s", json.dumps({"url": url, "body": payload}, ensure_ascii=False))
            try:
                with self._slots:
                    with self._lock:
                        self.network_calls += 1
                    response = self._client().post(url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last = exc
                log.warning("transport failure (attempt %d): %s", attempt + 1, exc)
                continue
            log.debug("response %s %s", response.status_code, response.text[:2000])
            if response.status_code == 429 or response.status_code >= 500:
                last = TransportError(f"HTTP {response.status_code}")
                continue
            if response.status_code >= 400:
                raise TransportError(f"HTTP {response.status_code}: {response.text[:200]}")
            return response.text
        raise TransportError(f"giving up after {policy.max_attempts} attempts: {last}")


def _numbered(candidates: Sequence[str], label: str) -> str:
    return "\n".join(f"{label}{i + 1}: {c}" for i, c in enumerate(candidates))


def _climax_marked(outline: Outline) -> str:
    lines = []
    for i, event in enumerate(outline.events):
        mark = "[climax] " if i == outline.climax_index else ""
        lines.append(f"{i}. {mark}{' '.join(event.text.split())}")
    return "\n".join(lines)


class LLMBackend:
    """Model-backed implementation of every pipeline call."""

    kind = "llm"

    def __init__(self, client: ChatClient, theme: str = "", conflict: str = "") -> None:
        self.client = client
        self.profile = client.profile
        self.theme = theme
        self.conflict = conflict

    def with_context(self, theme: str, conflict: str = "") -> LLMBackend:
        return LLMBackend(self.client, theme, conflict)

    def usage(self) -> dict[str, int]:
        return dict(self.client.usage)

    def _ask(
        self,
        template: str,
        stage: str,
        parser: Callable[[str], T],
        ordinal: str | int = 0,
        temperature: float | None = None,
        transcript: list[str] | None = None,
        **values: object,
    ) -> T:
        fields: dict[str, object] = {"theme": self.theme, "conflict": self.conflict}
        fields.update(values)
        messages = load_template(template, self.profile.language).render(**fields)
        temp = self.profile.temperature(stage) if temperature is None else temperature
        retries = self.profile.retry.parse_retries
        error: ProviderParseError | None = None
        for attempt in range(retries + 1):
            tag = ordinal if attempt == 0 else f"{ordinal}#retry{attempt}"
            reply = self.client.complete(messages, temp, tag)
            if transcript is not None:
                transcript.append(reply.content)
            try:
                return parser(reply.content)
            except ProviderParseError as exc:
                error = exc
                log.warning("%s: unparseable response (attempt %d): %s", template, attempt + 1, exc)
        assert error is not None
        raise error

    # -- engine interface --------------------------------------------

    def propose(self, request: ProposeRequest) -> list[PlotEvent]:
        outline_text = render_outline(request.outline)
        state = "|".join(e.id for e in request.outline.events)
        draw = request.sample > 0
        if request.direction is Direction.BACKWARD:
            origin = Origin.SIMULATION if draw else Origin.BACKWARD_SEARCH
            ordinal = f"s{request.sample}" if draw else 0
            texts = self._ask(
                "rising_action", "plot_generation",
                lambda raw: parsing.parse_event_list(raw, 1 if draw else request.k),
                ordinal=ordinal, temperature=request.temperature,
                outline=outline_text, direction="backward", k=request.k,
            )
            tags = [f"{ordinal}.{i}" for i in range(len(texts))]
        else:
            origin = Origin.SIMULATION if draw else Origin.FORWARD_SEARCH
            ordinals = [f"s{request.sample}"] if draw else [f"0.{j}" for j in range(request.k)]
            texts = [
                self._ask(
                    "falling_action", "plot_generation", parsing.parse_single_plot,
                    ordinal=o, temperature=request.temperature,
                    outline=outline_text, direction="forward", k=request.k,
                )
                for o in ordinals
            ]
            tags = ordinals
        return [
            PlotEvent(derive_id("llm", state, request.direction.value, tag, text), text, origin)
            for tag, text in zip(tags, texts)
        ]

    def score(self, outline: Outline) -> ScoreBreakdown:
        scores = self._ask("evaluation", "evaluation", parsing.parse_scores, outline=render_outline(outline))
        return ScoreBreakdown.from_dimensions(scores)

    # -- pipeline stages ---------------------------------------------

    def generate_conflicts(self, theme: str, transcript: list[str] | None = None) -> list[str]:
        return self._ask("conflict", "conflict", parsing.parse_numbered_options, transcript=transcript, theme=theme)

    def screen(self, candidates: Sequence[str], criterion: str, transcript: list[str] | None = None) -> int:
        if len(candidates) <= 1:
            return 0
        label = "conflict" if criterion == "conflict" else "plot"
        try:
            return self._ask(
                f"{criterion}_screening", f"{criterion}_screening",
                lambda raw: parsing.parse_best(raw, candidates),
                transcript=transcript, candidates=_numbered(candidates, label),
            )
        except ProviderParseError as exc:
            log.warning("screening %s failed (%s); falling back to the first candidate", criterion, exc)
            return 0

    def generate_climaxes(self, theme: str, conflict: str, transcript: list[str] | None = None) -> list[str]:
        return self._ask(
            "climax", "climax", parsing.parse_numbered_options,
            transcript=transcript, theme=theme, conflict=conflict,
        )

    def generate_bookends(self, outline: Outline) -> tuple[str, str]:
        return self._ask("bookends", "refinement", parsing.parse_bookends, outline=render_outline(outline))

    def critique(self, outline: Outline) -> list[EditOp]:
        return self._ask("critic", "critic", parsing.parse_edit_script, outline=_climax_marked(outline))

    def write_segment(self, outline: StagedOutline, segment: str) -> str:
        return self._ask(
            f"segment_{segment}", "fiction", parsing.parse_segment,
            outline=render_outline(outline, labels=True),
        )

    def direct_outline(self, theme: str, conflict: str, climax: str) -> DirectOutline:
        return self._ask(
            "direct_outline", "direct", parsing.parse_direct_outline,
            theme=theme, conflict=conflict, climax=climax,
        )

    def judge_comparative(self, fictions: Sequence[str], dimensions: Sequence[str]) -> Judgment:
        rendered = "\n\n".join(f"### Fiction {i + 1}\n{text}" for i, text in enumerate(fictions))
        return self._ask(
            "judge", "judge",
            lambda raw: parsing.parse_judgment(raw, len(fictions), dimensions),
            fictions=rendered, dimensions=", ".join(dimensions),
        )
