import json
import logging

import httpx
import pytest

from bitmcts.cache import ResponseCache
from bitmcts.errors import CacheMissError, ConfigError, ProviderParseError, TransportError
from bitmcts.narrative import Direction, Origin, Outline, PlotEvent, stage_partition
from bitmcts.prompts import load_template, parse_template
from bitmcts.providers.base import JUDGE_DIMENSIONS, ProposeRequest, ProviderProfile
from bitmcts.providers.llm import ChatClient, LLMBackend

from conftest import FakeChatServer, ev, root_outline


def make(profile, server, env, tmp_path=None, offline=False):
    cache = ResponseCache(tmp_path / "cache") if tmp_path is not None else None
    client = ChatClient(profile, cache=cache, offline=offline, transport=server.transport(),
                        env=env, sleep=lambda s: None)
    return LLMBackend(client, theme="Loyalty", conflict="Duty against love")


def test_backward_propose_takes_first_k(profile, fake_env):
    server = FakeChatServer({"rising_action": '{"events":["a","b","c","d","e"]}'})
    backend = make(profile, server, fake_env)
    events = backend.propose(ProposeRequest(root_outline(), Direction.BACKWARD, 4))
    assert [e.text for e in events] == ["a", "b", "c", "d"]
    assert all(e.origin is Origin.BACKWARD_SEARCH for e in events)
    assert len(server.requests) == 1


def test_forward_propose_repeats_prompt_k_times(profile, fake_env, tmp_path):
    server = FakeChatServer()
    backend = make(profile, server, fake_env, tmp_path)
    events = backend.propose(ProposeRequest(root_outline(), Direction.FORWARD, 3))
    assert len(events) == 3 and len({e.text for e in events}) == 3
    assert [name for name, _ in server.requests] == ["falling_action"] * 3
    # Same request again: every ordinal is cached, no new traffic.
    again = backend.propose(ProposeRequest(root_outline(), Direction.FORWARD, 3))
    assert [e.text for e in again] == [e.text for e in events]
    assert len(server.requests) == 3


def test_rollout_draw_uses_sample_ordinal(profile, fake_env, tmp_path):
    server = FakeChatServer()
    backend = make(profile, server, fake_env, tmp_path)
    a = backend.propose(ProposeRequest(root_outline(), Direction.FORWARD, 1, sample=1))
    b = backend.propose(ProposeRequest(root_outline(), Direction.FORWARD, 1, sample=2))
    assert a[0].origin is Origin.SIMULATION
    assert a[0].text != b[0].text and len(server.requests) == 2


def test_trailing_prose_is_tolerated(profile, fake_env):
    server = FakeChatServer({"falling_action": 'Sure! {"plot": "next"} Hope that helps.'})
    events = make(profile, server, fake_env).propose(ProposeRequest(root_outline(), Direction.FORWARD, 1))
    assert events[0].text == "next"


def test_prompt_carries_outline_and_temperatures(profile, fake_env):
    server = FakeChatServer()
    backend = make(profile, server, fake_env)
    outline = Outline((PlotEvent("c", "The bridge falls", Origin.CLIMAX),), 0)
    backend.score(outline)
    backend.generate_conflicts("Loyalty")
    name, body = server.requests[0]
    assert name == "evaluation" and body["temperature"] == 0.0
    assert "1. The bridge falls" in body["messages"][1]["content"]
    assert server.requests[1][1]["temperature"] == 0.4
    assert body["model"] == "fake-model"


def test_score_total_from_dimensions(profile, fake_env):
    scores = {"overall_quality": 2, "major_flaws": 5, "character_development": 9, "setting": 10,
              "consistency": 7, "relatedness": 6, "causal_temporal": 8, "theme": 8,
              "readability": 9, "creativity": 7}
    server = FakeChatServer({"evaluation": json.dumps(scores)})
    assert make(profile, server, fake_env).score(root_outline()).total == pytest.approx(7.1)


def test_parse_retry_then_failure(profile, fake_env):
    server = FakeChatServer({"evaluation": "not json"})
    with pytest.raises(ProviderParseError):
        make(profile, server, fake_env).score(root_outline())
    assert len(server.requests) == 1 + profile.retry.parse_retries


def test_parse_retry_recovers(profile, fake_env):
    good = json.dumps({"plot": "fine"})
    server = FakeChatServer({"falling_action": lambda user, n: "garbage" if n == 1 else good})
    events = make(profile, server, fake_env).propose(ProposeRequest(root_outline(), Direction.FORWARD, 1))
    assert events[0].text == "fine" and len(server.requests) == 2


def test_screen_falls_back_to_first_after_retries(profile, fake_env, caplog):
    server = FakeChatServer({"climax_screening": '{"best": "nothing like it"}'})
    backend = make(profile, server, fake_env)
    assert backend.screen(["one option", "two option"], "climax") == 0
    assert len(server.requests) == 3
    assert "falling back" in caplog.text


def test_screen_single_candidate_makes_no_call(profile, fake_env):
    server = FakeChatServer()
    assert make(profile, server, fake_env).screen(["only"], "conflict") == 0
    assert server.requests == []


def test_conflict_screen_resolves_label(profile, fake_env):
    server = FakeChatServer()
    backend = make(profile, server, fake_env)
    options = backend.generate_conflicts("Loyalty")
    assert len(options) == 5
    assert backend.screen(options, "conflict") == 1


def test_http_retries_on_5xx_and_429(profile, fake_env):
    inner = FakeChatServer()
    statuses = iter([500, 429])

    def handler(request):
        status = next(statuses, None)
        return httpx.Response(status) if status else inner(request)

    sleeps = []
    client = ChatClient(profile, transport=httpx.MockTransport(handler), env=fake_env, sleep=sleeps.append)
    reply = client.complete([{"role": "system", "content": load_template("judge").system},
                             {"role": "user", "content": "x"}], 0.0)
    assert reply.content and client.network_calls == 3
    assert sleeps == [0.0, 0.0]


def test_http_gives_up_after_max_attempts(fake_env):
    profile = ProviderProfile(endpoint="http://x/v1")
    profile.retry.backoff = 0.5
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused")

    sleeps = []
    client = ChatClient(profile, transport=httpx.MockTransport(handler), env=fake_env, sleep=sleeps.append)
    with pytest.raises(TransportError):
        client.complete([{"role": "user", "content": "x"}], 0.0)
    assert len(calls) == 3 and sleeps == [0.5, 1.0]


def test_http_client_error_is_not_retried(profile, fake_env):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401, text="bad key")

    client = ChatClient(profile, transport=httpx.MockTransport(handler), env=fake_env)
    with pytest.raises(TransportError, match="401"):
        client.complete([{"role": "user", "content": "x"}], 0.0)
    assert len(calls) == 1


def test_malformed_body_is_parse_error(profile, fake_env):
    client = ChatClient(profile, transport=httpx.MockTransport(lambda r: httpx.Response(200, json={})), env=fake_env)
    with pytest.raises(ProviderParseError):
        client.complete([{"role": "user", "content": "x"}], 0.0)


def test_missing_api_key_is_config_error(profile):
    client = ChatClient(profile, transport=FakeChatServer().transport(), env={})
    with pytest.raises(ConfigError):
        client.complete([{"role": "user", "content": "x"}], 0.0)


def test_bearer_header_and_key_not_logged(profile, fake_env, caplog):
    seen = []
    inner = FakeChatServer()

    def handler(request):
        seen.append(request.headers["authorization"])
        return inner(request)

    client = ChatClient(profile, transport=httpx.MockTransport(handler), env=fake_env)
    with caplog.at_level(logging.DEBUG, logger="bitmcts"):
        client.complete([{"role": "system", "content": load_template("judge").system},
                         {"role": "user", "content": "x"}], 0.0)
    assert seen == ["Bearer test-key"]
    assert "test-key" not in caplog.text and "request" in caplog.text


def test_offline_cold_cache_raises_without_network(profile, fake_env, tmp_path):
    server = FakeChatServer()
    backend = make(profile, server, fake_env, tmp_path, offline=True)
    with pytest.raises(CacheMissError):
        backend.generate_conflicts("Loyalty")
    assert server.requests == [] and backend.client.network_calls == 0


def test_offline_warm_cache_replays(profile, fake_env, tmp_path):
    online = make(profile, FakeChatServer(), fake_env, tmp_path)
    first = online.generate_conflicts("Loyalty")
    server = FakeChatServer()
    offline = make(profile, server, fake_env, tmp_path, offline=True)
    assert offline.generate_conflicts("Loyalty") == first
    assert server.requests == [] and offline.client.network_calls == 0


def test_segment_prompt_contains_full_outline(profile, fake_env):
    server = FakeChatServer()
    backend = make(profile, server, fake_env)
    outline = Outline(
        (ev("Opening", Origin.REFINEMENT_OPENING), PlotEvent("c", "Peak", Origin.CLIMAX),
         ev("Closing", Origin.REFINEMENT_CLOSING)),
        1,
    )
    staged = stage_partition(outline)
    for segment in ("beginning", "body", "ending"):
        assert backend.write_segment(staged, segment)
    for name, body in server.requests:
        user = body["messages"][1]["content"]
        assert "1. [exposition] Opening" in user and "2. [climax] Peak" in user
        assert "3. [resolution] Closing" in user
    assert [n for n, _ in server.requests] == ["segment_beginning", "segment_body", "segment_ending"]


def test_judge_roundtrip(profile, fake_env):
    dims = list(JUDGE_DIMENSIONS)
    reply = json.dumps({"best": {d: "Fiction 2" for d in dims}, "worst": {d: "Fiction 1" for d in dims}})
    server = FakeChatServer({"judge": reply})
    j = make(profile, server, fake_env).judge_comparative(["aa", "bbb"], dims)
    assert set(j.best.values()) == {1} and set(j.worst.values()) == {0}
    assert "### Fiction 2\nbbb" in server.requests[0][1]["messages"][1]["content"]


def test_critic_prompt_marks_climax(profile, fake_env):
    server = FakeChatServer()
    outline = Outline((ev("r"), PlotEvent("c", "Peak", Origin.CLIMAX)), 1)
    make(profile, server, fake_env).critique(outline)
    user = server.requests[0][1]["messages"][1]["content"]
    assert "0. r\n1. [climax] Peak" in user


def test_templates_language_fallback():
    zh = load_template("conflict", "zh")
    en = load_template("conflict", "en")
    assert zh.system != en.system
    assert load_template("evaluation", "zh") == load_template("evaluation", "en")
    messages = en.render(theme="Love")
    assert "Theme: Love" in messages[1]["content"]
    assert '{"conflict1": "Text"' in messages[1]["content"]  # literal braces survive


def test_template_parser_requires_sections():
    with pytest.raises(ValueError):
        parse_template("x", "no sections here")
