import hashlib
import json
from pathlib import Path

import httpx
import pytest
from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from bitmcts.narrative import Origin, Outline, PlotEvent
from bitmcts.prompts import load_template
from bitmcts.providers.base import SCORE_DIMENSIONS, ProviderProfile, RetryPolicy
from bitmcts.schemas import load_schema

TEMPLATES = (
    "conflict", "conflict_screening", "climax", "climax_screening", "rising_action",
    "falling_action", "evaluation", "bookends", "critic", "segment_beginning",
    "segment_body", "segment_ending", "direct_outline", "judge",
)


def ev(text, origin=Origin.FORWARD_SEARCH):
    return PlotEvent(id=f"id-{text}", text=text, origin=origin)


def root_outline(text="climax"):
    return Outline.root(PlotEvent(id="id-climax", text=text, origin=Origin.CLIMAX))


def schema_validator(name):
    registry = Registry().with_resources(
        (f"bitmcts/{n}.schema.json", Resource.from_contents(load_schema(n)))
        for n in ("outline", "tree", "artifact")
    )
    return Draft202012Validator(load_schema(name), registry=registry)


class FakeChatServer:
    """Answers chat-completions requests by recognising the prompt template.

    Outputs are deterministic functions of the request plus a per-template
    counter, so repeated identical prompts still yield distinct events.
    """

    def __init__(self, overrides=None):
        self.by_system = {load_template(n).system: n for n in TEMPLATES}
        self.requests = []
        self.counters = {}
        self.overrides = dict(overrides or {})

    def _h(self, *parts):
        return hashlib.sha256("|".join(map(str, parts)).encode()).hexdigest()[:6]

    def content(self, name, user):
        n = self.counters[name] = self.counters.get(name, 0) + 1
        tag = self._h(name, user, n)
        if name in self.overrides:
            value = self.overrides[name]
            return value(user, n) if callable(value) else value
        if name == "conflict":
            return json.dumps({f"conflict{i}": f"Conflict {i} {tag}" for i in range(1, 6)})
        if name == "conflict_screening":
            return 'Sure. {"best": "conflict2"}'
        if name == "climax":
            return json.dumps({f"plot{i}": f"Climax option {i} {tag}" for i in range(1, 6)})
        if name == "climax_screening":
            return '{"best": "plot3"}'
        if name == "rising_action":
            return json.dumps({"events": [f"Earlier event {i} {tag}" for i in range(5)]})
        if name == "falling_action":
            return json.dumps({"plot": f"Later event {tag}"})
        if name == "evaluation":
            return json.dumps({d: 1 + int(self._h(d, user), 16) % 10 for d in SCORE_DIMENSIONS})
        if name == "bookends":
            return json.dumps({"opening": f"Opening {tag}", "closing": f"Closing {tag}"})
        if name == "critic":
            return json.dumps({"operations": [{"op": "keep", "index": 0}]})
        if name.startswith("segment_"):
            return f"Prose for {name[8:]} {tag}."
        if name == "direct_outline":
            return json.dumps({"events": [f"Direct {i} {tag}" for i in range(4)], "climax_position": 2})
        if name == "judge":
            return json.dumps({"best": {}, "worst": {}})
        raise AssertionError(name)

    def __call__(self, request):
        body = json.loads(request.content)
        system, user = body["messages"][0]["content"], body["messages"][1]["content"]
        name = self.by_system.get(system)
        assert name is not None, "unrecognised system prompt"
        self.requests.append((name, body))
        content = self.content(name, user)
        return httpx.Response(
            200,
            json={
                "choices": [{"message": {"role": "assistant", "content": content}}],
                "usage": {"prompt_tokens": len(user.split()), "completion_tokens": len(content.split())},
            },
        )

    def transport(self):
        return httpx.MockTransport(self)


@pytest.fixture
def fake_server():
    return FakeChatServer()


@pytest.fixture
def profile():
    return ProviderProfile(
        endpoint="http://llm.test/v1", model="fake-model",
        retry=RetryPolicy(max_attempts=3, backoff=0.0, parse_retries=2),
    )


@pytest.fixture
def fake_env():
    return {"OPENAI_API_KEY": "test-key"}


@pytest.fixture
def epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def tree_files(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# One "PASS/FAIL criterion N: ..." line per acceptance check, repeated in the
# terminal summary so it survives output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
